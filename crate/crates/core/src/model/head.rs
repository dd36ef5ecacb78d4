use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use super::mask::{LayerSpec, MaskKernelVector};
use super::FeatureMaps;
use crate::data::NUM_CLASSES;
use crate::diffusion::clip_span;
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};
use crate::nn::{
    relu_backward, relu_inplace, roi_align, roi_align_backward, timestep_embedding, Grads, Linear, ParamStore,
    RoiAlignCache,
};
use crate::scalar::{sigmoid, Scalar};

/// Upper bound on log-scale deltas so `exp` cannot overflow.
pub const SCALE_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Prior foreground probability used to initialize the class bias.
const PRIOR_PROB: f64 = 0.01;

/// Per-box predictions of one head pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<T> {
    /// `N × 5` raw class logits.
    pub class_logits: Array2<T>,
    /// `N × 4` refined boxes in signal space.
    pub box_pred: Array2<T>,
    /// `N × 4` refined boxes in pixels as `(cx, cy, w, h)`, not clipped.
    pub boxes: Array2<T>,
    /// `N × P` mask kernel parameters, one row per box.
    pub kernels: Array2<T>,
    /// Max over classes of the per-class sigmoid.
    pub scores: Vec<f64>,
    pub spec: LayerSpec,
}

impl<T: Scalar> HeadOutput<T> {
    pub fn len(&self) -> usize {
        self.class_logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask_kernel(&self, i: usize) -> MaskKernelVector<T> {
        MaskKernelVector {
            theta: self.kernels.row(i).to_owned(),
            spec: self.spec.clone(),
        }
    }

    pub fn mask_kernels(&self) -> Vec<MaskKernelVector<T>> {
        (0..self.len()).map(|i| self.mask_kernel(i)).collect()
    }

    /// Highest-scoring class of each row.
    pub fn labels(&self) -> Vec<usize> {
        self.class_logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |best, (k, &v)| if v > best.1 { (k, v) } else { best },
                    )
                    .0
            })
            .collect()
    }

    /// Unclipped pixel box of row `i`.
    pub fn bbox(&self, i: usize) -> BBox {
        let r = self.boxes.row(i);
        let (cx, cy, w, h) = (r[0].as_f64(), r[1].as_f64(), r[2].as_f64(), r[3].as_f64());
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
    }

    /// Row `i` clipped to the image and widened to at least one pixel.
    pub fn clipped_bbox(&self, i: usize, image: ImageSize) -> BBox {
        clip_bbox(&self.bbox(i), image)
    }
}

pub(crate) fn clip_bbox(b: &BBox, image: ImageSize) -> BBox {
    let [x1, y1, x2, y2] = b.xyxy();
    let (x1, x2) = clip_span(x1, x2, image.width as f64);
    let (y1, y2) = clip_span(y1, y2, image.height as f64);
    BBox::from_xyxy(x1, y1, x2, y2)
}

/// Gradients flowing into one stage's outputs.
#[derive(Debug, Clone)]
pub struct StageGrad<T> {
    pub class_logits: Array2<T>,
    /// W.r.t. the pixel `(cx, cy, w, h)` boxes.
    pub boxes: Array2<T>,
    pub kernels: Array2<T>,
}

impl<T: Scalar> StageGrad<T> {
    pub fn zeros(n: usize, kernel_len: usize) -> Self {
        Self {
            class_logits: Array2::zeros((n, NUM_CLASSES)),
            boxes: Array2::zeros((n, 4)),
            kernels: Array2::zeros((n, kernel_len)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    fc1: Linear,
    time: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
    kernel: Linear,
}

#[derive(Debug, Clone)]
pub struct StageCache<T> {
    roi: RoiAlignCache<T>,
    x: Array2<T>,
    emb: Array2<T>,
    h1: Array2<T>,
    h2: Array2<T>,
    anchors: Array2<T>,
    raw: Array2<T>,
}

/// Cascade of box heads: every stage pools region features for its input boxes,
/// adds the projected timestep embedding and predicts logits, box deltas and a
/// mask kernel vector. Each stage's boxes feed the next one without gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    stages: Vec<Stage>,
    pub pool: usize,
    pub time_dim: usize,
    pub context: f64,
    pub spec: LayerSpec,
    pub image: ImageSize,
    pub signal_scale: f64,
}

impl Head {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        channels: usize,
        pool: usize,
        hidden: usize,
        time_dim: usize,
        stages: usize,
        context: f64,
        spec: LayerSpec,
        image: ImageSize,
        signal_scale: f64,
        rng: &mut R,
    ) -> Self {
        let stages = (0..stages)
            .map(|k| {
                let n = |s: &str| format!("head{k}.{s}");
                let cls = Linear::new(ps, &n("cls"), hidden, NUM_CLASSES, Some(0.01), rng);
                let prior = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
                ps.get_mut(cls.bias).fill(T::lit(prior));
                Stage {
                    fc1: Linear::new(ps, &n("fc1"), channels * pool * pool, hidden, None, rng),
                    time: Linear::new(ps, &n("time"), time_dim, hidden, None, rng),
                    fc2: Linear::new(ps, &n("fc2"), hidden, hidden, None, rng),
                    cls,
                    reg: Linear::new(ps, &n("reg"), hidden, 4, Some(1e-3), rng),
                    kernel: Linear::new(
                        ps,
                        &n("kernel"),
                        hidden,
                        spec.param_count(),
                        Some((1.0 / hidden as f64).sqrt()),
                        rng,
                    ),
                }
            })
            .collect();
        Self {
            stages,
            pool,
            time_dim,
            context,
            spec,
            image,
            signal_scale,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Pixel `(cx, cy, w, h)` anchors for signal-space input boxes.
    pub fn anchors_from_signal<T: Scalar>(&self, signal: &Array2<T>) -> Result<Array2<T>> {
        let scaler = crate::diffusion::SignalScaler::new(self.signal_scale)?;
        let boxes = crate::diffusion::decode_boxes(signal, self.image, scaler)?;
        Ok(anchors_from_boxes(&boxes))
    }

    /// Runs all stages; returns every stage's output with its cache.
    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        features: &FeatureMaps<T>,
        signal: &Array2<T>,
        t: usize,
    ) -> Result<Vec<(HeadOutput<T>, StageCache<T>)>> {
        if signal.ncols() != 4 {
            return Err(Error::arg("box state must have 4 columns"));
        }
        let mut anchors = self.anchors_from_signal(signal)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (o, cache) = self.stage_forward(stage, ps, features, anchors, t)?;
            anchors = anchors_from_boxes(&(0..o.len()).map(|i| o.clipped_bbox(i, self.image)).collect::<Vec<_>>());
            out.push((o, cache));
        }
        Ok(out)
    }

    fn stage_forward<T: Scalar>(
        &self,
        stage: &Stage,
        ps: &ParamStore<T>,
        features: &FeatureMaps<T>,
        anchors: Array2<T>,
        t: usize,
    ) -> Result<(HeadOutput<T>, StageCache<T>)> {
        let n = anchors.nrows();
        let maps: Vec<(&Array3<T>, usize)> = features.levels.iter().map(|l| (&l.map, l.stride)).collect();
        let mut rois = Vec::with_capacity(n);
        let mut levels = Vec::with_capacity(n);
        for a in anchors.rows() {
            let (cx, cy) = (a[0].as_f64(), a[1].as_f64());
            let (w, h) = (a[2].as_f64() * self.context, a[3].as_f64() * self.context);
            rois.push([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]);
            levels.push(assign_level(a[2].as_f64(), a[3].as_f64(), maps.len()));
        }
        let (x, roi) = roi_align(&maps, &rois, &levels, self.pool);
        let emb = timestep_embedding::<T>(t, self.time_dim).insert_axis(Axis(0));
        let mut h1 = stage.fc1.forward(ps, &x.view());
        h1 += &stage.time.forward(ps, &emb.view());
        relu_inplace(&mut h1);
        let mut h2 = stage.fc2.forward(ps, &h1.view());
        relu_inplace(&mut h2);
        let class_logits = stage.cls.forward(ps, &h2.view());
        let raw = stage.reg.forward(ps, &h2.view());
        let kernels = stage.kernel.forward(ps, &h2.view());

        let mut boxes = Array2::zeros((n, 4));
        let mut box_pred = Array2::zeros((n, 4));
        let (iw, ih) = (self.image.width as f64, self.image.height as f64);
        for i in 0..n {
            let a = anchors.row(i);
            let r = raw.row(i);
            let (acx, acy, aw, ah) = (a[0], a[1], a[2], a[3]);
            let half = T::lit(0.5);
            let clamp = T::lit(SCALE_CLAMP);
            let cx = acx + r[0] * half * aw;
            let cy = acy + r[1] * half * ah;
            let w = aw * r[2].min(clamp).exp();
            let h = ah * r[3].min(clamp).exp();
            let unit = [cx.as_f64() / iw, cy.as_f64() / ih, w.as_f64() / iw, h.as_f64() / ih];
            for (k, v) in [cx, cy, w, h].into_iter().enumerate() {
                boxes[[i, k]] = v;
                box_pred[[i, k]] = T::lit((2.0 * unit[k] - 1.0) * self.signal_scale);
            }
        }
        let scores = class_logits
            .rows()
            .into_iter()
            .map(|r| r.iter().fold(0.0f64, |m, &v| m.max(sigmoid(v).as_f64())))
            .collect();
        Ok((
            HeadOutput {
                class_logits,
                box_pred,
                boxes,
                kernels,
                scores,
                spec: self.spec.clone(),
            },
            StageCache {
                roi,
                x,
                emb,
                h1,
                h2,
                anchors,
                raw,
            },
        ))
    }

    /// Accumulates parameter gradients of all stages and returns gradients w.r.t. the levels.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        caches: &[&StageCache<T>],
        d_out: &[StageGrad<T>],
        level_shapes: &[(usize, usize, usize)],
    ) -> Vec<Array3<T>> {
        let mut d_levels: Vec<Array3<T>> = level_shapes.iter().map(|&s| Array3::zeros(s)).collect();
        for ((stage, cache), d) in self.stages.iter().zip(caches).zip(d_out) {
            let n = cache.x.nrows();
            if n == 0 {
                continue;
            }
            let clamp = T::lit(SCALE_CLAMP);
            let half = T::lit(0.5);
            let mut d_raw = Array2::zeros((n, 4));
            for i in 0..n {
                let a = cache.anchors.row(i);
                let r = cache.raw.row(i);
                let g = d.boxes.row(i);
                d_raw[[i, 0]] = g[0] * half * a[2];
                d_raw[[i, 1]] = g[1] * half * a[3];
                if r[2] < clamp {
                    d_raw[[i, 2]] = g[2] * a[2] * r[2].exp();
                }
                if r[3] < clamp {
                    d_raw[[i, 3]] = g[3] * a[3] * r[3].exp();
                }
            }
            let h2 = cache.h2.view();
            let mut d_h2 = stage.cls.backward(ps, grads, &h2, &d.class_logits);
            d_h2 += &stage.reg.backward(ps, grads, &h2, &d_raw);
            d_h2 += &stage.kernel.backward(ps, grads, &h2, &d.kernels);
            relu_backward(&mut d_h2, &cache.h2);
            let mut d_h1 = stage.fc2.backward(ps, grads, &cache.h1.view(), &d_h2);
            relu_backward(&mut d_h1, &cache.h1);
            let d_t = d_h1.sum_axis(Axis(0)).insert_axis(Axis(0));
            stage.time.backward(ps, grads, &cache.emb.view(), &d_t);
            let d_x = stage.fc1.backward(ps, grads, &cache.x.view(), &d_h1);
            for (acc, g) in d_levels
                .iter_mut()
                .zip(roi_align_backward(&cache.roi, &d_x, level_shapes))
            {
                *acc += &g;
            }
        }
        d_levels
    }
}

fn anchors_from_boxes<T: Scalar>(boxes: &[BBox]) -> Array2<T> {
    let mut a = Array2::zeros((boxes.len(), 4));
    for (i, b) in boxes.iter().enumerate() {
        let (cx, cy) = b.center();
        for (k, v) in [cx, cy, b.w, b.h].into_iter().enumerate() {
            a[[i, k]] = T::lit(v);
        }
    }
    a
}

/// Pyramid index for a box of the given size, `floor(4 + log2(sqrt(wh) / 224))`
/// clamped to the available levels (level 2 is the stride-4 map).
pub fn assign_level(w: f64, h: f64, levels: usize) -> usize {
    let k = (4.0 + ((w * h).max(1e-6).sqrt() / 224.0).log2()).floor();
    let k = k.clamp(2.0, (levels + 1) as f64);
    k as usize - 2
}
