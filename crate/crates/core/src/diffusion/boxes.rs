use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};
use crate::scalar::Scalar;

/// Affine bridge between normalized `(cx, cy, w, h)` in `[0, 1]` and the signal range `[-s, s]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalScaler {
    scale: f64,
}

impl Default for SignalScaler {
    fn default() -> Self {
        Self { scale: 2.0 }
    }
}

impl SignalScaler {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::arg(format!("signal scale must be positive, got {scale}")));
        }
        Ok(Self { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[inline]
    pub fn to_signal(&self, unit: f64) -> f64 {
        (2.0 * unit - 1.0) * self.scale
    }

    /// Clamps to `[-s, s]` before mapping back to `[0, 1]`.
    #[inline]
    pub fn to_unit(&self, signal: f64) -> f64 {
        let s = signal.clamp(-self.scale, self.scale);
        (s / self.scale + 1.0) * 0.5
    }
}

pub fn encode_boxes<T: Scalar>(boxes: &[BBox], size: ImageSize, scaler: SignalScaler) -> Result<Array2<T>> {
    let (w, h) = (size.width as f64, size.height as f64);
    let mut out = Array2::zeros((boxes.len(), 4));
    for (i, b) in boxes.iter().enumerate() {
        if !b.is_finite() {
            return Err(Error::arg(format!("box {i} has non-finite coordinates")));
        }
        let (cx, cy) = b.center();
        let unit = [cx / w, cy / h, b.w / w, b.h / h];
        for (k, u) in unit.into_iter().enumerate() {
            out[[i, k]] = T::lit(scaler.to_signal(u));
        }
    }
    Ok(out)
}

/// Maps signal rows back to pixel boxes clipped to the image, each at least 1×1 pixel.
pub fn decode_boxes<T: Scalar>(signal: &Array2<T>, size: ImageSize, scaler: SignalScaler) -> Result<Vec<BBox>> {
    if signal.ncols() != 4 {
        return Err(Error::arg(format!("expected 4 columns, got {}", signal.ncols())));
    }
    let (w, h) = (size.width as f64, size.height as f64);
    signal
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let v: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::arg(format!("signal row {i} is not finite")));
            }
            let cx = scaler.to_unit(v[0]) * w;
            let cy = scaler.to_unit(v[1]) * h;
            let bw = scaler.to_unit(v[2]) * w;
            let bh = scaler.to_unit(v[3]) * h;
            let (x1, x2) = clip_span(cx - 0.5 * bw, cx + 0.5 * bw, w);
            let (y1, y2) = clip_span(cy - 0.5 * bh, cy + 0.5 * bh, h);
            Ok(BBox::from_xyxy(x1, y1, x2, y2))
        })
        .collect()
}

/// Clips `[lo, hi]` to `[0, limit]` and widens it to at least one pixel.
pub(crate) fn clip_span(lo: f64, hi: f64, limit: f64) -> (f64, f64) {
    let mut lo = lo.clamp(0.0, limit);
    let mut hi = hi.clamp(0.0, limit);
    if hi - lo < 1.0 {
        let mid = 0.5 * (lo + hi);
        lo = (mid - 0.5).clamp(0.0, limit - 1.0);
        hi = lo + 1.0;
    }
    (lo, hi)
}

/// Training-time box set: encoded ground truth first, standard-normal padding after.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBoxes<T> {
    pub signal: Array2<T>,
    /// `true` for slots holding a ground-truth box.
    pub is_real: Vec<bool>,
    /// Index into the input ground-truth list for each real slot, in slot order.
    pub kept: Vec<usize>,
}

pub fn pad_boxes<T: Scalar, R: Rng + ?Sized>(
    gt: &[BBox],
    target: usize,
    size: ImageSize,
    scaler: SignalScaler,
    rng: &mut R,
) -> Result<PaddedBoxes<T>> {
    if target < 1 {
        return Err(Error::arg("box count must be at least 1"));
    }
    let kept: Vec<usize> = if gt.len() > target {
        let mut idx = rand::seq::index::sample(rng, gt.len(), target).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..gt.len()).collect()
    };
    let chosen: Vec<BBox> = kept.iter().map(|&i| gt[i]).collect();
    let encoded = encode_boxes::<T>(&chosen, size, scaler)?;
    let mut signal = Array2::zeros((target, 4));
    signal.slice_mut(ndarray::s![..chosen.len(), ..]).assign(&encoded);
    for i in chosen.len()..target {
        for k in 0..4 {
            let z: f64 = rng.sample(StandardNormal);
            signal[[i, k]] = T::lit(z);
        }
    }
    let is_real = (0..target).map(|i| i < chosen.len()).collect();
    Ok(PaddedBoxes { signal, is_real, kept })
}
