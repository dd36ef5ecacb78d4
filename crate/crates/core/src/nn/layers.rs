use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Square-kernel 2-D convolution, weights stored as `(out, in·k·k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Array2<T>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = ps.normal(
            format!("{name}.weight"),
            &[cout, fan_in],
            (2.0 / fan_in as f64).sqrt(),
            rng,
        );
        let bias = bias.then(|| ps.zeros(format!("{name}.bias"), &[cout]));
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &Array3<T>) -> Array2<T> {
        let (c, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = (ci * h + iy as usize) * w;
                        let dst = row + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[dst + ox] = xs[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &Array2<T>, (c, h, w): (usize, usize, usize)) -> Array3<T> {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let mut x = Array3::zeros((c, h, w));
        let xs = x.as_slice_mut().expect("standard layout");
        let cs = cols.as_slice().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = (ci * h + iy as usize) * w;
                        let src = row + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[dst + ix as usize] += cs[src + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Array3<T>) -> (Array3<T>, ConvCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let cols = if self.is_pointwise() {
            x.as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, h * w))
                .expect("contiguous")
        } else {
            self.im2col(x)
        };
        let mut out = ps.mat(self.weight).dot(&cols);
        if let Some(b) = self.bias {
            out += &ps.vec(b).insert_axis(Axis(1));
        }
        let out = out
            .into_shape_with_order((self.cout, ho, wo))
            .expect("conv output shape");
        (
            out,
            ConvCache {
                cols,
                in_shape: (c, h, w),
            },
        )
    }

    /// Accumulates parameter gradients; returns the input gradient when requested.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &ConvCache<T>,
        dout: &Array3<T>,
        input_grad: bool,
    ) -> Option<Array3<T>> {
        let (co, ho, wo) = dout.dim();
        let d = dout
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, ho * wo))
            .expect("contiguous");
        general_mat_mul(T::one(), &d, &cache.cols.t(), T::one(), &mut grads.mat_mut(self.weight));
        if let Some(b) = self.bias {
            let mut gb = grads.vec_mut(b);
            gb += &d.sum_axis(Axis(1));
        }
        if !input_grad {
            return None;
        }
        let dcols = ps.mat(self.weight).t().dot(&d);
        Some(if self.is_pointwise() {
            dcols
                .into_shape_with_order(cache.in_shape)
                .expect("pointwise input shape")
        } else {
            self.col2im(&dcols, cache.in_shape)
        })
    }
}

/// Fully connected layer on row-major batches, weights stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let std = std.unwrap_or_else(|| (2.0 / fan_in as f64).sqrt());
        Self {
            weight: ps.normal(format!("{name}.weight"), &[fan_out, fan_in], std, rng),
            bias: ps.zeros(format!("{name}.bias"), &[fan_out]),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&ps.mat(self.weight).t());
        y += &ps.vec(self.bias);
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &ArrayView2<T>,
        dy: &Array2<T>,
    ) -> Array2<T> {
        general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut grads.mat_mut(self.weight));
        let mut gb = grads.vec_mut(self.bias);
        gb += &dy.sum_axis(Axis(0));
        dy.dot(&ps.mat(self.weight))
    }
}
