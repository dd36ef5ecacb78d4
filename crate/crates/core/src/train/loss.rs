use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::matching::{MatchResult, Matcher};
use crate::data::{Annotation, Mask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};
use crate::model::{HeadOutput, StageGrad};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub w_mask: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub matcher: Matcher,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_cls: 2.0,
            w_l1: 5.0,
            w_giou: 2.0,
            w_mask: 5.0,
            alpha: 0.25,
            gamma: 2.0,
            matcher: Matcher::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_cls, self.w_l1, self.w_giou, self.w_mask];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !w.iter().any(|&x| x > 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.gamma >= 0.0) {
            return Err(Error::Config(
                "focal alpha must be in [0, 1] and gamma nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Unweighted loss terms, each averaged per matched pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask: f64,
}

impl LossComponents {
    pub fn total(&self, cfg: &LossConfig) -> f64 {
        cfg.w_cls * self.cls + cfg.w_l1 * self.l1 + cfg.w_giou * self.giou + cfg.w_mask * self.mask
    }

    pub fn add(&mut self, o: &LossComponents) {
        self.cls += o.cls;
        self.l1 += o.l1;
        self.giou += o.giou;
        self.mask += o.mask;
    }

    pub fn scale(&mut self, k: f64) {
        self.cls *= k;
        self.l1 *= k;
        self.giou *= k;
        self.mask *= k;
    }

    pub fn as_map(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("cls", self.cls),
            ("l1", self.l1),
            ("giou", self.giou),
            ("mask", self.mask),
        ])
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.as_map().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal_loss(logit: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-logit).exp());
    if positive {
        let log_p = -softplus(-logit);
        let q = 1.0 - p;
        let l = -alpha * q.powf(gamma) * log_p;
        let d = alpha * q.powf(gamma) * (gamma * p * log_p - q);
        (l, d)
    } else {
        let log_q = -softplus(logit);
        let l = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let d = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q);
        (l, d)
    }
}

/// Generalized IoU of two boxes.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (cx, cy) = a.center();
    giou_with_grad([cx, cy, a.w, a.h], b).0
}

/// GIoU of a `(cx, cy, w, h)` box against `gt` and its gradient w.r.t. that box.
pub fn giou_with_grad(p: [f64; 4], gt: &BBox) -> (f64, [f64; 4]) {
    let [cx, cy, w, h] = p;
    let a = [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h];
    let b = gt.xyxy();
    let area_a = w * h;
    let area_b = gt.w * gt.h;
    // Intersection and enclosure extents per axis, with d/d(a_lo), d/d(a_hi).
    let axis = |lo: f64, hi: f64, blo: f64, bhi: f64| {
        let ilo = lo.max(blo);
        let ihi = hi.min(bhi);
        let iw = (ihi - ilo).max(0.0);
        let (di_lo, di_hi) = if iw > 0.0 {
            (if lo > blo { -1.0 } else { 0.0 }, if hi < bhi { 1.0 } else { 0.0 })
        } else {
            (0.0, 0.0)
        };
        let cw = hi.max(bhi) - lo.min(blo);
        let dc_lo = if lo < blo { -1.0 } else { 0.0 };
        let dc_hi = if hi > bhi { 1.0 } else { 0.0 };
        (iw, di_lo, di_hi, cw, dc_lo, dc_hi)
    };
    let (iw, dix1, dix2, cw, dcx1, dcx2) = axis(a[0], a[2], b[0], b[2]);
    let (ih, diy1, diy2, ch, dcy1, dcy2) = axis(a[1], a[3], b[1], b[3]);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let enc = cw * ch;
    if union <= 0.0 || enc <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union - (enc - union) / enc;
    let dg_di = 1.0 / union + inter / (union * union) - 1.0 / enc;
    let dg_da = -inter / (union * union) + 1.0 / enc;
    let dg_dc = -union / (enc * enc);
    // w.r.t. x1, y1, x2, y2
    let d = [
        dg_di * dix1 * ih + dg_da * (-(a[3] - a[1])) + dg_dc * dcx1 * ch,
        dg_di * diy1 * iw + dg_da * (-(a[2] - a[0])) + dg_dc * dcy1 * cw,
        dg_di * dix2 * ih + dg_da * (a[3] - a[1]) + dg_dc * dcx2 * ch,
        dg_di * diy2 * iw + dg_da * (a[2] - a[0]) + dg_dc * dcy2 * cw,
    ];
    let grad = [d[0] + d[2], d[1] + d[3], 0.5 * (d[2] - d[0]), 0.5 * (d[3] - d[1])];
    (value, grad)
}

const DICE_SMOOTH: f64 = 1.0;

/// `1 − Dice` between a probability map and a binary target, with its gradient.
pub fn dice_loss<T: Scalar>(prob: &ArrayView2<T>, target: &Mask) -> (f64, Array2<T>) {
    let (h, w) = prob.dim();
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_q = 0.0;
    for y in 0..h {
        for x in 0..w {
            let p = prob[[y, x]].as_f64();
            sum_p += p;
            if target.get(x, y) {
                inter += p;
                sum_q += 1.0;
            }
        }
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_q + DICE_SMOOTH;
    let loss = 1.0 - num / den;
    let grad = Array2::from_shape_fn((h, w), |(y, x)| {
        let q = if target.get(x, y) { 1.0 } else { 0.0 };
        T::lit(-(2.0 * q * den - num) / (den * den))
    });
    (loss, grad)
}

/// Loss of one head stage with gradients w.r.t. its outputs and the matched mask maps.
#[derive(Debug, Clone)]
pub struct StageLoss<T> {
    pub components: LossComponents,
    pub grad: StageGrad<T>,
    /// Gradient w.r.t. each matched pair's probability map, in `MatchResult::pairs` order.
    pub d_masks: Vec<Array2<T>>,
}

/// Set loss for one stage. `masks[i]` is the image-resolution probability map of
/// `matching.pairs[i]`.
pub fn compute_loss<T: Scalar>(
    out: &HeadOutput<T>,
    gts: &[Annotation],
    matching: &MatchResult,
    masks: &[Array2<T>],
    image: ImageSize,
    cfg: &LossConfig,
) -> Result<StageLoss<T>> {
    if masks.len() != matching.pairs.len() && cfg.w_mask > 0.0 {
        return Err(Error::arg("one mask map per matched pair is required"));
    }
    let n = out.len();
    let mut grad = StageGrad::zeros(n, out.kernels.ncols());
    let norm = 1.0 / matching.pairs.len().max(1) as f64;
    let mut comp = LossComponents::default();

    let mut target = vec![None; n];
    for &(p, g) in &matching.pairs {
        target[p] = Some(gts[g].class.index());
    }
    for (p, tgt) in target.iter().enumerate() {
        for k in 0..NUM_CLASSES {
            let (l, d) = focal_loss(out.class_logits[[p, k]].as_f64(), *tgt == Some(k), cfg.alpha, cfg.gamma);
            comp.cls += l * norm;
            grad.class_logits[[p, k]] = T::lit(d * norm * cfg.w_cls);
        }
    }

    let (iw, ih) = (image.width as f64, image.height as f64);
    let scale = [iw, ih, iw, ih];
    let mut d_masks = Vec::with_capacity(matching.pairs.len());
    for (i, &(p, g)) in matching.pairs.iter().enumerate() {
        let gt = &gts[g];
        let (gcx, gcy) = gt.bbox.center();
        let gv = [gcx, gcy, gt.bbox.w, gt.bbox.h];
        let pv: [f64; 4] = std::array::from_fn(|k| out.boxes[[p, k]].as_f64());
        for k in 0..4 {
            let diff = (pv[k] - gv[k]) / scale[k];
            comp.l1 += diff.abs() * norm;
            let s = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad.boxes[[p, k]] += T::lit(cfg.w_l1 * norm * s / scale[k]);
        }
        let (gi, dg) = giou_with_grad(pv, &gt.bbox);
        comp.giou += (1.0 - gi) * norm;
        for k in 0..4 {
            grad.boxes[[p, k]] -= T::lit(cfg.w_giou * norm * dg[k]);
        }
        if cfg.w_mask > 0.0 {
            let (l, mut d) = dice_loss(&masks[i].view(), &gt.mask);
            comp.mask += l * norm;
            d.mapv_inplace(|v| v * T::lit(cfg.w_mask * norm));
            d_masks.push(d);
        }
    }
    if let Some(c) = comp.non_finite() {
        return Err(Error::NonFiniteLoss {
            component: c.to_string(),
            image_ids: Vec::new(),
            timesteps: Vec::new(),
        });
    }
    Ok(StageLoss {
        components: comp,
        grad,
        d_masks,
    })
}
