//! Dynamic mask decoding: a per-instance parameter vector is unpacked into a
//! chain of 1×1 convolutions and run over the fused feature map plus two
//! box-relative coordinate channels.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

use super::FusedFeatureMap;
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};
use crate::nn::Resampler;
use crate::scalar::{sigmoid, Scalar};

/// Extra input channels carrying box-relative x and y.
pub const COORD_CHANNELS: usize = 2;

/// `(in_channels, out_channels)` of each 1×1 layer, final output 1 channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec(Vec<(usize, usize)>);

impl LayerSpec {
    pub fn new(layers: Vec<(usize, usize)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("mask layer spec is empty".into()));
        }
        if let Some(w) = layers.windows(2).find(|w| w[0].1 != w[1].0) {
            return Err(Error::Config(format!(
                "mask layers {:?} -> {:?} are not channel-compatible",
                w[0], w[1]
            )));
        }
        if layers.iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err(Error::Config("mask layers need positive widths".into()));
        }
        if layers.last().unwrap().1 != 1 {
            return Err(Error::Config("last mask layer must output one channel".into()));
        }
        Ok(Self(layers))
    }

    /// Spec for `mask_channels` feature channels (plus coordinates) through the hidden widths.
    pub fn from_hidden(mask_channels: usize, hidden: &[usize]) -> Result<Self> {
        let mut widths = vec![mask_channels + COORD_CHANNELS];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self::new(widths.windows(2).map(|w| (w[0], w[1])).collect())
    }

    pub fn layers(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn in_channels(&self) -> usize {
        self.0[0].0
    }

    pub fn param_count(&self) -> usize {
        self.0.iter().map(|&(i, o)| i * o + o).sum()
    }
}

/// `Σ (in·out + out)` over a validated spec.
pub fn kernel_param_count(layers: &[(usize, usize)]) -> Result<usize> {
    Ok(LayerSpec::new(layers.to_vec())?.param_count())
}

/// Flat per-instance kernel parameters: for each layer, weights (row-major `out × in`) then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskKernelVector<T> {
    pub theta: Array1<T>,
    pub spec: LayerSpec,
}

impl<T: Scalar> MaskKernelVector<T> {
    pub fn new(theta: Array1<T>, spec: LayerSpec) -> Result<Self> {
        if theta.len() != spec.param_count() {
            return Err(Error::arg(format!(
                "kernel vector has {} entries, spec needs {}",
                theta.len(),
                spec.param_count()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("kernel vector has non-finite entries"));
        }
        Ok(Self { theta, spec })
    }

    /// Splits into `(weight, bias)` per layer.
    pub fn unflatten(&self) -> Vec<(Array2<T>, Array1<T>)> {
        let mut at = 0;
        self.spec
            .layers()
            .iter()
            .map(|&(i, o)| {
                let w = self.theta.slice(s![at..at + i * o]).to_owned();
                at += i * o;
                let b = self.theta.slice(s![at..at + o]).to_owned();
                at += o;
                (w.into_shape_with_order((o, i)).expect("layer shape"), b)
            })
            .collect()
    }

    pub fn flatten(layers: &[(Array2<T>, Array1<T>)]) -> Result<Self> {
        let spec = LayerSpec::new(layers.iter().map(|(w, _)| (w.ncols(), w.nrows())).collect())?;
        let mut theta = Vec::with_capacity(spec.param_count());
        for (w, b) in layers {
            if b.len() != w.nrows() {
                return Err(Error::arg("bias length does not match layer outputs"));
            }
            theta.extend(w.iter().copied());
            theta.extend(b.iter().copied());
        }
        Self::new(Array1::from(theta), spec)
    }
}

/// Intermediate values of one decode, enough to backpropagate.
#[derive(Debug, Clone)]
pub struct MaskCache<T> {
    input: Array2<T>,
    /// Post-activation outputs of each layer; the last one holds sigmoid probabilities.
    acts: Vec<Array2<T>>,
    layers: Vec<(Array2<T>, Array1<T>)>,
    fused_hw: (usize, usize),
    up: Resampler<T>,
    /// `(w, h)` used for the coordinate channels and whether each was floored at 1.
    extent: [(f64, bool); 2],
}

/// Gradients of [`mask_probabilities`] inputs.
#[derive(Debug, Clone)]
pub struct MaskGrads<T> {
    pub theta: Array1<T>,
    pub fused: Array3<T>,
    /// W.r.t. the box `(cx, cy, w, h)` through the coordinate channels.
    pub bbox: [T; 4],
}

fn coordinate_channels<T: Scalar>(hw: (usize, usize), stride: usize, bbox: &BBox) -> Array2<T> {
    let (h, w) = hw;
    let (cx, cy) = bbox.center();
    let (bw, bh) = (bbox.w.max(1.0), bbox.h.max(1.0));
    let mut out = Array2::zeros((COORD_CHANNELS, h * w));
    for y in 0..h {
        for x in 0..w {
            let px = (x as f64 + 0.5) * stride as f64;
            let py = (y as f64 + 0.5) * stride as f64;
            out[[0, y * w + x]] = T::lit((px - cx) / bw);
            out[[1, y * w + x]] = T::lit((py - cy) / bh);
        }
    }
    out
}

/// Runs the kernel chain and returns the mask probability map at image resolution.
pub fn mask_probabilities<T: Scalar>(
    fused: &FusedFeatureMap<T>,
    kernel: &MaskKernelVector<T>,
    bbox: &BBox,
    image: ImageSize,
) -> Result<(Array2<T>, MaskCache<T>)> {
    let (c, h, w) = fused.map.dim();
    if kernel.spec.in_channels() != c + COORD_CHANNELS {
        return Err(Error::arg(format!(
            "kernel expects {} input channels, feature map has {c} (+{COORD_CHANNELS})",
            kernel.spec.in_channels()
        )));
    }
    let mut input = Array2::zeros((c + COORD_CHANNELS, h * w));
    input
        .slice_mut(s![..c, ..])
        .assign(&fused.map.view().into_shape_with_order((c, h * w)).expect("contiguous"));
    input
        .slice_mut(s![c.., ..])
        .assign(&coordinate_channels((h, w), fused.stride, bbox));

    let layers = kernel.unflatten();
    let mut acts: Vec<Array2<T>> = Vec::with_capacity(layers.len());
    let last = layers.len() - 1;
    for (k, (wt, b)) in layers.iter().enumerate() {
        let x = if k == 0 { &input } else { &acts[k - 1] };
        let mut y = wt.dot(x) + b.view().insert_axis(Axis(1));
        if k == last {
            y.mapv_inplace(sigmoid);
        } else {
            y.mapv_inplace(|v| v.max(T::zero()));
        }
        acts.push(y);
    }
    let prob = acts[last].view().into_shape_with_order((h, w)).expect("single channel");
    let up = Resampler::new((h, w), (image.height, image.width));
    let full = up.apply2(&prob);
    Ok((
        full,
        MaskCache {
            input,
            acts,
            layers,
            fused_hw: (h, w),
            up,
            extent: [(bbox.w, bbox.w < 1.0), (bbox.h, bbox.h < 1.0)],
        },
    ))
}

/// Gradients of a scalar loss w.r.t. the kernel vector, the fused map and the
/// box, given its gradient w.r.t. the image-resolution probability map.
pub fn mask_probabilities_backward<T: Scalar>(cache: &MaskCache<T>, d_full: &ArrayView2<T>) -> MaskGrads<T> {
    let (h, w) = cache.fused_hw;
    let d_prob = cache.up.backward2(d_full);
    let last = cache.layers.len() - 1;
    let p = &cache.acts[last];
    let mut d = d_prob.into_shape_with_order((1, h * w)).expect("single channel");
    d.zip_mut_with(p, |g, &pv| *g = *g * pv * (T::one() - pv));

    let mut grads: Vec<(Array2<T>, Array1<T>)> = Vec::with_capacity(cache.layers.len());
    for k in (0..=last).rev() {
        let x = if k == 0 { &cache.input } else { &cache.acts[k - 1] };
        let (wt, _) = &cache.layers[k];
        let dw = d.dot(&x.t());
        let db = d.sum_axis(Axis(1));
        grads.push((dw, db));
        let mut dx = wt.t().dot(&d);
        if k > 0 {
            dx.zip_mut_with(&cache.acts[k - 1], |g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            });
        }
        d = dx;
    }
    grads.reverse();
    let mut theta = Vec::new();
    for (dw, db) in &grads {
        theta.extend(dw.iter().copied());
        theta.extend(db.iter().copied());
    }
    let c = cache.input.nrows() - COORD_CHANNELS;
    let d_fused = d
        .slice(s![..c, ..])
        .to_owned()
        .into_shape_with_order((c, h, w))
        .expect("feature channels");
    // coord = (p - center) / extent
    let mut bbox = [T::zero(); 4];
    for k in 0..COORD_CHANNELS {
        let (ext, floored) = cache.extent[k];
        let ext = T::lit(ext.max(1.0));
        let (mut dc, mut de) = (T::zero(), T::zero());
        for (&g, &v) in d.row(c + k).iter().zip(cache.input.row(c + k)) {
            dc -= g;
            de -= g * v;
        }
        bbox[k] = dc / ext;
        if !floored {
            bbox[2 + k] = de / ext;
        }
    }
    MaskGrads {
        theta: Array1::from(theta),
        fused: d_fused,
        bbox,
    }
}

/// Binary mask at image resolution: pixels whose probability exceeds `threshold`.
pub fn decode_mask<T: Scalar>(
    fused: &FusedFeatureMap<T>,
    kernel: &MaskKernelVector<T>,
    bbox: &BBox,
    image: ImageSize,
    threshold: f64,
) -> Result<Mask> {
    let (prob, _) = mask_probabilities(fused, kernel, bbox, image)?;
    let th = T::lit(threshold);
    Mask::from_bits(image, prob.iter().map(|&p| p > th).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fused(
        c: usize,
        h: usize,
        w: usize,
        stride: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> FusedFeatureMap<f64> {
        FusedFeatureMap {
            map: Array3::from_shape_fn((c, h, w), |(a, b, d)| f(a, b, d)),
            stride,
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(kernel_param_count(&[(10, 8), (8, 8), (8, 1)]).unwrap(), 169);
        assert_eq!(kernel_param_count(&[(1, 1)]).unwrap(), 2);
        assert_eq!(kernel_param_count(&[(8, 8), (8, 1)]).unwrap(), 81);
        assert_eq!(LayerSpec::from_hidden(8, &[8, 8]).unwrap().param_count(), 169);
        assert!(kernel_param_count(&[(10, 8), (7, 1)]).is_err());
        assert!(kernel_param_count(&[(10, 2)]).is_err());
        assert!(kernel_param_count(&[]).is_err());
    }

    fn saturated(bias: f64) -> MaskKernelVector<f64> {
        let spec = LayerSpec::from_hidden(8, &[8, 8]).unwrap();
        let mut theta = Array1::zeros(spec.param_count());
        let n = theta.len();
        theta[n - 1] = bias;
        MaskKernelVector::new(theta, spec).unwrap()
    }

    #[test]
    fn saturated_negative_bias_gives_empty_mask() {
        let f = fused(8, 6, 6, 8, |a, b, c| (a + b + c) as f64 * 0.1);
        let size = ImageSize::square(48);
        let k = saturated(-10.0);
        let (p, _) = mask_probabilities(&f, &k, &BBox::new(4.0, 4.0, 20.0, 20.0), size).unwrap();
        assert!(p.iter().all(|&v| (v - 4.5397868702434395e-5).abs() < 1e-12));
        let m = decode_mask(&f, &k, &BBox::new(4.0, 4.0, 20.0, 20.0), size, 0.5).unwrap();
        assert_eq!(m.area(), 0);
        assert_eq!(m.size(), size);
    }

    #[test]
    fn saturated_positive_bias_gives_full_mask() {
        let f = fused(8, 6, 6, 8, |_, _, _| 0.3);
        let size = ImageSize::square(48);
        let m = decode_mask(&f, &saturated(10.0), &BBox::new(4.0, 4.0, 20.0, 20.0), size, 0.5).unwrap();
        assert_eq!(m.area(), 48 * 48);
    }

    #[test]
    fn closed_form_square() {
        // One feature channel: +10 inside a centered square, -10 elsewhere; the
        // single layer passes it through unchanged, so sigmoid(±10) splits at 0.5.
        let f = fused(1, 16, 16, 1, |_, y, x| {
            if (5..11).contains(&y) && (5..11).contains(&x) {
                10.0
            } else {
                -10.0
            }
        });
        let spec = LayerSpec::new(vec![(3, 1)]).unwrap();
        let k = MaskKernelVector::new(ndarray::array![1.0, 0.0, 0.0, 0.0], spec).unwrap();
        let size = ImageSize::square(16);
        let m = decode_mask(&f, &k, &BBox::new(5.0, 5.0, 6.0, 6.0), size, 0.5).unwrap();
        let mut expect = Mask::empty(size);
        expect.fill_rect(5, 5, 11, 11);
        assert_eq!(m, expect);
    }

    #[test]
    fn length_mismatch_rejected() {
        let spec = LayerSpec::new(vec![(3, 1)]).unwrap();
        assert!(MaskKernelVector::new(Array1::<f64>::zeros(5), spec.clone()).is_err());
        let k = MaskKernelVector::new(Array1::<f64>::zeros(4), spec).unwrap();
        let f = fused(2, 4, 4, 4, |_, _, _| 0.0);
        assert!(decode_mask(&f, &k, &BBox::new(0.0, 0.0, 4.0, 4.0), ImageSize::square(16), 0.5).is_err());
    }

    #[test]
    fn batch_and_single_decode_agree() {
        let f = fused(2, 8, 8, 2, |a, b, c| ((a * 5 + b * 3 + c) % 7) as f64 - 3.0);
        let spec = LayerSpec::from_hidden(2, &[3]).unwrap();
        let size = ImageSize::square(16);
        let kernels: Vec<MaskKernelVector<f64>> = (0..3)
            .map(|i| {
                let theta = Array1::from_shape_fn(spec.param_count(), |j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6);
                MaskKernelVector::new(theta, spec.clone()).unwrap()
            })
            .collect();
        let boxes = [
            BBox::new(1.0, 2.0, 5.0, 6.0),
            BBox::new(8.0, 8.0, 7.0, 3.0),
            BBox::new(0.0, 0.0, 16.0, 16.0),
        ];
        let batch: Vec<Mask> = kernels
            .iter()
            .zip(&boxes)
            .map(|(k, b)| decode_mask(&f, k, b, size, 0.5).unwrap())
            .collect();
        assert_eq!(decode_mask(&f, &kernels[1], &boxes[1], size, 0.5).unwrap(), batch[1]);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(
            widths in proptest::collection::vec(1usize..6, 1..4),
            seed in 0u64..1000,
        ) {
            let spec = LayerSpec::from_hidden(widths[0], &widths[1..]).unwrap();
            let theta = Array1::from_shape_fn(spec.param_count(), |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 37.0);
            let k = MaskKernelVector::new(theta, spec).unwrap();
            let again = MaskKernelVector::flatten(&k.unflatten()).unwrap();
            prop_assert_eq!(again, k);
        }

        #[test]
        fn probabilities_are_open_unit_interval(seed in 0u64..500) {
            let f = fused(2, 4, 4, 4, |a, b, c| (((a + b * 3 + c * 5) as u64 + seed) % 9) as f64 - 4.0);
            let spec = LayerSpec::from_hidden(2, &[4]).unwrap();
            let theta = Array1::from_shape_fn(spec.param_count(), |i| (((i as u64) * 31 + seed) % 11) as f64 * 0.2 - 1.0);
            let k = MaskKernelVector::new(theta, spec).unwrap();
            let (p, _) = mask_probabilities(&f, &k, &BBox::new(2.0, 2.0, 8.0, 8.0), ImageSize::square(16)).unwrap();
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
