use ndarray::Array3;

use super::loss::{compute_loss, LossComponents, LossConfig};
use super::matching::assign;
use crate::data::{Annotation, ImageRecord};
use crate::diffusion::BoxState;
use crate::error::Result;
use crate::model::{mask_probabilities, mask_probabilities_backward, Model, StageGrad};
use crate::nn::Grads;
use crate::scalar::Scalar;

/// Loss of one image summed over cascade stages, optionally with parameter gradients.
#[derive(Debug, Clone)]
pub struct ImageObjective<T> {
    pub total: f64,
    pub components: LossComponents,
    pub grads: Option<Grads<T>>,
    /// Positive predictions of the last stage.
    pub matched: usize,
}

pub fn image_objective<T: Scalar>(
    model: &Model<T>,
    image: &ImageRecord,
    gts: &[Annotation],
    state: &BoxState<T>,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<ImageObjective<T>> {
    let size = image.size();
    let pass = model.forward_train(image, state)?;
    let mut components = LossComponents::default();
    let mut stage_grads: Vec<StageGrad<T>> = Vec::with_capacity(pass.stages.len());
    let mut d_fused = Array3::zeros(pass.fused.map.dim());
    let mut matched = 0;
    for out in &pass.stages {
        let m = assign(cfg.matcher, out, gts, size, cfg);
        matched = m.pairs.len();
        let mut maps = Vec::with_capacity(m.pairs.len());
        let mut caches = Vec::with_capacity(m.pairs.len());
        if cfg.w_mask > 0.0 {
            for &(p, _) in &m.pairs {
                let (prob, cache) = mask_probabilities(&pass.fused, &out.mask_kernel(p), &out.bbox(p), size)?;
                maps.push(prob);
                caches.push(cache);
            }
        }
        let loss = compute_loss(out, gts, &m, &maps, size, cfg)?;
        components.add(&loss.components);
        let mut grad = loss.grad;
        if want_grad {
            for ((&(p, _), cache), d) in m.pairs.iter().zip(&caches).zip(&loss.d_masks) {
                let g = mask_probabilities_backward(cache, &d.view());
                let mut row = grad.kernels.row_mut(p);
                row += &g.theta;
                for k in 0..4 {
                    grad.boxes[[p, k]] += g.bbox[k];
                }
                d_fused += &g.fused;
            }
        }
        stage_grads.push(grad);
    }
    let grads = want_grad.then(|| model.backward(&pass, &stage_grads, &d_fused));
    Ok(ImageObjective {
        total: components.total(cfg),
        components,
        grads,
        matched,
    })
}
