use ndarray::Array3;
use rand::Rng;

use super::config::{BackboneKind, ModelConfig};
use super::{FeatureLevel, FeatureMaps};
use crate::error::{Error, Result};
use crate::nn::{
    nearest_upsample2, nearest_upsample2_backward, relu_backward, relu_inplace, Conv2d, ConvCache, Grads, ParamStore,
};
use crate::scalar::Scalar;

/// Residual CNN with stride-4..32 outputs and a top-down lateral pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub kind: BackboneKind,
    stem: Conv2d,
    stages: Vec<(Conv2d, Conv2d)>,
    laterals: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    stem: ConvCache<T>,
    stem_out: Array3<T>,
    stages: Vec<StageCache<T>>,
    laterals: Vec<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    down: ConvCache<T>,
    d: Array3<T>,
    res: ConvCache<T>,
    r: Array3<T>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        if cfg.backbone != BackboneKind::TinyCnn {
            // Deeper registry entries share this pyramid layout; their weights are
            // loaded over the freshly built parameters by name.
            log::info!("building `{}` with the residual pyramid layout", cfg.backbone);
        }
        let ch = &cfg.backbone_channels;
        let stem = Conv2d::new(ps, "backbone.stem", 1, ch[0], 3, 2, true, rng);
        let mut stages = Vec::with_capacity(4);
        for k in 0..4 {
            let down = Conv2d::new(
                ps,
                &format!("backbone.stage{k}.down"),
                ch[k],
                ch[k + 1],
                3,
                2,
                true,
                rng,
            );
            let res = Conv2d::new(
                ps,
                &format!("backbone.stage{k}.res"),
                ch[k + 1],
                ch[k + 1],
                3,
                1,
                true,
                rng,
            );
            stages.push((down, res));
        }
        let laterals = (0..4)
            .map(|k| {
                Conv2d::new(
                    ps,
                    &format!("fpn.lateral{k}"),
                    ch[k + 1],
                    cfg.fpn_channels,
                    1,
                    1,
                    true,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            kind: cfg.backbone,
            stem,
            stages,
            laterals,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        input: &Array3<T>,
    ) -> Result<(FeatureMaps<T>, BackboneCache<T>)> {
        if input.dim().0 != 1 {
            return Err(Error::arg("backbone expects one grayscale channel"));
        }
        let (mut x, stem_cache) = self.stem.forward(ps, input);
        relu_inplace(&mut x);
        let stem_out = x.clone();
        let mut stage_caches = Vec::with_capacity(4);
        for (down, res) in &self.stages {
            let (mut d, dc) = down.forward(ps, &x);
            relu_inplace(&mut d);
            let (mut r, rc) = res.forward(ps, &d);
            r += &d;
            relu_inplace(&mut r);
            x = r.clone();
            stage_caches.push(StageCache {
                down: dc,
                d,
                res: rc,
                r,
            });
        }
        let mut lat_caches = Vec::with_capacity(4);
        let mut lats: Vec<Array3<T>> = Vec::with_capacity(4);
        for (lat, sc) in self.laterals.iter().zip(&stage_caches) {
            let (l, c) = lat.forward(ps, &sc.r);
            lats.push(l);
            lat_caches.push(c);
        }
        for k in (0..3).rev() {
            let (_, h, w) = lats[k].dim();
            let up = nearest_upsample2(&lats[k + 1], h, w);
            lats[k] += &up;
        }
        let levels = lats
            .into_iter()
            .zip(ModelConfig::STRIDES)
            .map(|(map, stride)| FeatureLevel { stride, map })
            .collect();
        Ok((
            FeatureMaps { levels },
            BackboneCache {
                stem: stem_cache,
                stem_out,
                stages: stage_caches,
                laterals: lat_caches,
            },
        ))
    }

    /// Backpropagates level gradients into the backbone parameters.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &BackboneCache<T>,
        mut d_levels: Vec<Array3<T>>,
    ) {
        for k in 0..3 {
            let (_, h, w) = d_levels[k + 1].dim();
            let back = nearest_upsample2_backward(&d_levels[k], (h, w));
            d_levels[k + 1] += &back;
        }
        let mut d_r: Vec<Array3<T>> = self
            .laterals
            .iter()
            .zip(&cache.laterals)
            .zip(&d_levels)
            .map(|((lat, c), d)| lat.backward(ps, grads, c, d, true).expect("input grad"))
            .collect();
        for k in (0..4).rev() {
            let (down, res) = &self.stages[k];
            let sc = &cache.stages[k];
            let mut g = std::mem::replace(&mut d_r[k], Array3::zeros((0, 0, 0)));
            relu_backward(&mut g, &sc.r);
            let mut dd = res.backward(ps, grads, &sc.res, &g, true).expect("input grad");
            dd += &g;
            relu_backward(&mut dd, &sc.d);
            let need_input = true;
            let dx = down.backward(ps, grads, &sc.down, &dd, need_input).expect("input grad");
            if k > 0 {
                d_r[k - 1] += &dx;
            } else {
                let mut ds = dx;
                relu_backward(&mut ds, &cache.stem_out);
                self.stem.backward(ps, grads, &cache.stem, &ds, false);
            }
        }
    }
}
