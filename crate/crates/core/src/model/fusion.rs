use ndarray::Array3;
use rand::Rng;

use super::{FeatureMaps, FusedFeatureMap};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvCache, Grads, ParamStore, Resampler};
use crate::scalar::Scalar;

/// Projects every pyramid level to the mask channel count, resamples it to the
/// fusion stride and sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub proj: Vec<Conv2d>,
    pub stride: usize,
    pub out_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct FusionCache<T> {
    convs: Vec<ConvCache<T>>,
    resamplers: Vec<Resampler<T>>,
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        levels: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        out_hw: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let proj = (0..levels)
            .map(|k| {
                Conv2d::new(
                    ps,
                    &format!("fusion.proj{k}"),
                    in_channels,
                    out_channels,
                    1,
                    1,
                    true,
                    rng,
                )
            })
            .collect();
        Self { proj, stride, out_hw }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        features: &FeatureMaps<T>,
    ) -> Result<(FusedFeatureMap<T>, FusionCache<T>)> {
        if features.levels.len() != self.proj.len() {
            return Err(Error::arg(format!(
                "fusion expects {} levels, got {}",
                self.proj.len(),
                features.levels.len()
            )));
        }
        let c = self.proj.first().map_or(0, |p| p.cout);
        let mut out = Array3::zeros((c, self.out_hw.0, self.out_hw.1));
        let mut convs = Vec::with_capacity(self.proj.len());
        let mut resamplers = Vec::with_capacity(self.proj.len());
        for (conv, level) in self.proj.iter().zip(&features.levels) {
            if level.map.dim().0 != conv.cin {
                return Err(Error::arg("feature level channel count does not match fusion input"));
            }
            let (p, cache) = conv.forward(ps, &level.map);
            let (_, h, w) = p.dim();
            let rs = Resampler::new((h, w), self.out_hw);
            out += &rs.apply(&p);
            convs.push(cache);
            resamplers.push(rs);
        }
        Ok((
            FusedFeatureMap {
                map: out,
                stride: self.stride,
            },
            FusionCache { convs, resamplers },
        ))
    }

    /// Returns the gradient w.r.t. each input level.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &FusionCache<T>,
        d_out: &Array3<T>,
    ) -> Vec<Array3<T>> {
        self.proj
            .iter()
            .zip(&cache.convs)
            .zip(&cache.resamplers)
            .map(|((conv, cc), rs)| {
                let dp = rs.backward(d_out);
                conv.backward(ps, grads, cc, &dp, true).expect("input grad")
            })
            .collect()
    }
}
