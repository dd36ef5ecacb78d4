use ndarray::{Array1, Array2, Array3, ArrayView2, Zip};

use crate::scalar::Scalar;

pub fn relu_inplace<T: Scalar, D: ndarray::Dimension>(x: &mut ndarray::Array<T, D>) {
    x.mapv_inplace(|v| v.max(T::zero()));
}

/// Masks `grad` where the post-activation `out` is not positive.
pub fn relu_backward<T: Scalar, D: ndarray::Dimension>(grad: &mut ndarray::Array<T, D>, out: &ndarray::Array<T, D>) {
    Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Nearest-neighbour ×2 upsampling cropped to `(h, w)`.
pub fn nearest_upsample2<T: Scalar>(x: &Array3<T>, h: usize, w: usize) -> Array3<T> {
    let c = x.dim().0;
    Array3::from_shape_fn((c, h, w), |(k, y, xx)| x[[k, y / 2, xx / 2]])
}

pub fn nearest_upsample2_backward<T: Scalar>(d: &Array3<T>, coarse: (usize, usize)) -> Array3<T> {
    let (c, h, w) = d.dim();
    let mut out = Array3::zeros((c, coarse.0, coarse.1));
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[k, y / 2, x / 2]] += d[[k, y, x]];
            }
        }
    }
    out
}

/// Row-stochastic bilinear interpolation matrix `(out, in)` with half-pixel centers.
pub fn resample_matrix<T: Scalar>(n_in: usize, n_out: usize) -> Array2<T> {
    let mut m = Array2::zeros((n_out, n_in));
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[[o, i0]] += T::lit(1.0 - frac);
        m[[o, i1]] += T::lit(frac);
    }
    m
}

/// Separable bilinear resize between two fixed grid sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler<T> {
    ry: Array2<T>,
    rx: Array2<T>,
}

impl<T: Scalar> Resampler<T> {
    pub fn new(from: (usize, usize), to: (usize, usize)) -> Self {
        Self {
            ry: resample_matrix(from.0, to.0),
            rx: resample_matrix(from.1, to.1),
        }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.ry.nrows(), self.rx.nrows())
    }

    pub fn apply2(&self, x: &ArrayView2<T>) -> Array2<T> {
        self.ry.dot(x).dot(&self.rx.t())
    }

    pub fn backward2(&self, d: &ArrayView2<T>) -> Array2<T> {
        self.ry.t().dot(d).dot(&self.rx)
    }

    pub fn apply(&self, x: &Array3<T>) -> Array3<T> {
        let (h, w) = self.out_hw();
        let mut out = Array3::zeros((x.dim().0, h, w));
        for (mut o, xi) in out.outer_iter_mut().zip(x.outer_iter()) {
            o.assign(&self.apply2(&xi));
        }
        out
    }

    pub fn backward(&self, d: &Array3<T>) -> Array3<T> {
        let (h, w) = (self.ry.ncols(), self.rx.ncols());
        let mut out = Array3::zeros((d.dim().0, h, w));
        for (mut o, di) in out.outer_iter_mut().zip(d.outer_iter()) {
            o.assign(&self.backward2(&di));
        }
        out
    }
}

/// Bilinear taps of every pooled sample: `(level, [(flat index, weight); 4])`.
#[derive(Debug, Clone)]
pub struct RoiAlignCache<T> {
    pool: usize,
    levels: Vec<usize>,
    taps: Vec<[(usize, T); 4]>,
}

fn bilinear_taps<T: Scalar>(fy: f64, fx: f64, h: usize, w: usize) -> [(usize, T); 4] {
    if fy < -1.0 || fy > h as f64 || fx < -1.0 || fx > w as f64 {
        return [(0, T::zero()); 4];
    }
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (fy - y0 as f64, fx - x0 as f64);
    [
        (y0 * w + x0, T::lit((1.0 - ly) * (1.0 - lx))),
        (y0 * w + x1, T::lit((1.0 - ly) * lx)),
        (y1 * w + x0, T::lit(ly * (1.0 - lx))),
        (y1 * w + x1, T::lit(ly * lx)),
    ]
}

/// Pools a `pool × pool` grid per box (one bilinear sample at each bin center)
/// from the level assigned to that box.
///
/// `levels[i]` selects the map for box `i`; boxes are pixel `[x1, y1, x2, y2]`.
/// Output rows are `C·pool·pool` long, channel-major.
pub fn roi_align<T: Scalar>(
    maps: &[(&Array3<T>, usize)],
    boxes: &[[f64; 4]],
    levels: &[usize],
    pool: usize,
) -> (Array2<T>, RoiAlignCache<T>) {
    let c = maps.first().map_or(0, |m| m.0.dim().0);
    let bins = pool * pool;
    let mut out = Array2::zeros((boxes.len(), c * bins));
    let mut taps = Vec::with_capacity(boxes.len() * bins);
    for (i, (b, &lvl)) in boxes.iter().zip(levels).enumerate() {
        let (map, stride) = maps[lvl];
        let (_, h, w) = map.dim();
        let plane = h * w;
        let flat = map.as_slice().expect("standard layout");
        let (bw, bh) = ((b[2] - b[0]) / pool as f64, (b[3] - b[1]) / pool as f64);
        let mut row = out.row_mut(i);
        for py in 0..pool {
            for px in 0..pool {
                let y = b[1] + (py as f64 + 0.5) * bh;
                let x = b[0] + (px as f64 + 0.5) * bw;
                let t = bilinear_taps::<T>(y / stride as f64 - 0.5, x / stride as f64 - 0.5, h, w);
                let bin = py * pool + px;
                for ch in 0..c {
                    let base = ch * plane;
                    row[ch * bins + bin] = t.iter().fold(T::zero(), |acc, &(idx, wt)| acc + wt * flat[base + idx]);
                }
                taps.push(t);
            }
        }
    }
    (
        out,
        RoiAlignCache {
            pool,
            levels: levels.to_vec(),
            taps,
        },
    )
}

/// Scatters pooled gradients back onto the level maps (shapes given by `shapes`).
pub fn roi_align_backward<T: Scalar>(
    cache: &RoiAlignCache<T>,
    d: &Array2<T>,
    shapes: &[(usize, usize, usize)],
) -> Vec<Array3<T>> {
    let mut out: Vec<Array3<T>> = shapes.iter().map(|&s| Array3::zeros(s)).collect();
    let bins = cache.pool * cache.pool;
    for (i, &lvl) in cache.levels.iter().enumerate() {
        let (c, h, w) = shapes[lvl];
        let plane = h * w;
        let g = out[lvl].as_slice_mut().expect("standard layout");
        let row = d.row(i);
        for bin in 0..bins {
            let t = &cache.taps[i * bins + bin];
            for ch in 0..c {
                let v = row[ch * bins + bin];
                if v == T::zero() {
                    continue;
                }
                for &(idx, wt) in t {
                    g[ch * plane + idx] += wt * v;
                }
            }
        }
    }
    out
}

/// Sinusoidal embedding `[sin(t·f_i), cos(t·f_i)]` with `f_i = 10000^(-i/half)`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Array1<T> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        e[i] = T::lit((t as f64 * f).sin());
        e[half + i] = T::lit((t as f64 * f).cos());
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_identity_and_halving() {
        let id: Array2<f64> = resample_matrix(5, 5);
        assert_eq!(id, Array2::<f64>::eye(5));
        let half: Array2<f64> = resample_matrix(4, 2);
        assert_eq!(half, ndarray::array![[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]]);
        let up: Array2<f64> = resample_matrix(2, 4);
        for r in up.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resampler_backward_is_adjoint() {
        let r = Resampler::<f64>::new((3, 5), (7, 4));
        let x = Array3::from_shape_fn((2, 3, 5), |(a, b, c)| (a + b * c) as f64 * 0.3 - 1.0);
        let d = Array3::from_shape_fn((2, 7, 4), |(a, b, c)| ((a * 3 + b + c) % 4) as f64 - 1.5);
        let lhs = (r.apply(&x) * &d).sum();
        let rhs = (r.backward(&d) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Array3::from_shape_fn((1, 3, 3), |(_, b, c)| (b * 3 + c) as f64);
        let d = Array3::from_shape_fn((1, 5, 6), |(_, b, c)| (b as f64 - c as f64) * 0.5);
        let lhs = (nearest_upsample2(&x, 5, 6) * &d).sum();
        let rhs = (nearest_upsample2_backward(&d, (3, 3)) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn roi_align_constant_map_and_adjoint() {
        let map = Array3::from_elem((2, 6, 6), 3.0f64);
        let (p, _) = roi_align(&[(&map, 4)], &[[2.0, 3.0, 17.0, 20.0]], &[0], 3);
        assert!(p.iter().all(|&v| (v - 3.0).abs() < 1e-12));

        let map = Array3::from_shape_fn((2, 6, 6), |(a, b, c)| (a * 36 + b * 6 + c) as f64 * 0.1);
        let boxes = [[2.0, 3.0, 17.0, 20.0], [0.0, 0.0, 24.0, 24.0]];
        let (p, cache) = roi_align(&[(&map, 4)], &boxes, &[0, 0], 3);
        let d = Array2::from_shape_fn(p.dim(), |(i, j)| ((i + j) % 3) as f64 - 1.0);
        let g = roi_align_backward(&cache, &d, &[(2, 6, 6)]);
        assert!(((p * &d).sum() - (&g[0] * &map).sum()).abs() < 1e-9);
    }

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding::<f64>(0, 8);
        assert_eq!(e.to_vec(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let a = timestep_embedding::<f64>(1, 8);
        let b = timestep_embedding::<f64>(1000, 8);
        assert!(a != b);
    }
}
