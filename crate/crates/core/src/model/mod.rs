//! Feature extraction, multiscale fusion, the cascaded box head and dynamic mask decoding.

mod backbone;
mod config;
mod fusion;
mod head;
mod mask;

use std::path::Path;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub use backbone::{Backbone, BackboneCache};
pub use config::{BackboneKind, ModelConfig};
pub use fusion::{Fusion, FusionCache};
pub use head::{assign_level, Head, HeadOutput, StageCache, StageGrad, SCALE_CLAMP};
pub use mask::{
    decode_mask, kernel_param_count, mask_probabilities, mask_probabilities_backward, LayerSpec, MaskCache, MaskGrads,
    MaskKernelVector, COORD_CHANNELS,
};

use crate::data::{ImageRecord, Mask};
use crate::diffusion::BoxState;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{read_container, write_container, Grads, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel<T> {
    pub stride: usize,
    pub map: Array3<T>,
}

/// Pyramid levels ordered by increasing stride, all with the same channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps<T> {
    pub levels: Vec<FeatureLevel<T>>,
}

impl<T: Scalar> FeatureMaps<T> {
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels.iter().map(|l| l.map.dim()).collect()
    }
}

/// Single-level map the mask kernels run on.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatureMap<T> {
    pub map: Array3<T>,
    pub stride: usize,
}

/// Everything a training step needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub features: FeatureMaps<T>,
    pub fused: FusedFeatureMap<T>,
    /// Output of every cascade stage, last one is the final prediction.
    pub stages: Vec<HeadOutput<T>>,
    backbone: BackboneCache<T>,
    fusion: FusionCache<T>,
    head: Vec<StageCache<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    backbone: Backbone,
    fusion: Fusion,
    head: Head,
    mask_spec: LayerSpec,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let backbone = Backbone::new(&mut ps, &config, &mut rng)?;
        let fusion = Fusion::new(
            &mut ps,
            ModelConfig::STRIDES.len(),
            config.fpn_channels,
            config.mask_channels,
            config.fusion_stride,
            config.fused_hw(),
            &mut rng,
        );
        let mask_spec = LayerSpec::from_hidden(config.mask_channels, &config.mask_hidden)?;
        let head = Head::new(
            &mut ps,
            config.fpn_channels,
            config.pool_size,
            config.head_hidden,
            config.time_dim,
            config.head_stages,
            config.roi_context,
            mask_spec.clone(),
            config.image_size,
            config.signal_scale,
            &mut rng,
        );
        let mut model = Self {
            config,
            params: ps,
            backbone,
            fusion,
            head,
            mask_spec,
        };
        if let Some(path) = model.config.backbone_weights.clone() {
            model.load_backbone_weights(&path)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn mask_spec(&self) -> &LayerSpec {
        &self.mask_spec
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Grayscale pixels scaled to roughly zero mean, unit spread.
    pub fn input_tensor(&self, image: &ImageRecord) -> Result<Array3<T>> {
        if image.size() != self.config.image_size {
            return Err(Error::arg(format!(
                "image {} is {}x{}, model expects {}x{}",
                image.image_id,
                image.width(),
                image.height(),
                self.config.image_size.width,
                self.config.image_size.height
            )));
        }
        let (h, w) = image.pixels.dim();
        Ok(Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            T::lit((image.pixels[[y, x]] as f64 / 255.0 - 0.5) / 0.25)
        }))
    }

    pub fn backbone_forward(&self, image: &ImageRecord) -> Result<FeatureMaps<T>> {
        let x = self.input_tensor(image)?;
        Ok(self.backbone.forward(&self.params, &x)?.0)
    }

    pub fn fuse_features(&self, features: &FeatureMaps<T>) -> Result<FusedFeatureMap<T>> {
        Ok(self.fusion.forward(&self.params, features)?.0)
    }

    /// Final-stage predictions for the given noisy boxes at their timestep.
    pub fn head_forward(&self, features: &FeatureMaps<T>, boxes: &BoxState<T>) -> Result<HeadOutput<T>> {
        let mut stages = self.head.forward(&self.params, features, &boxes.boxes, boxes.t)?;
        Ok(stages.pop().expect("at least one stage").0)
    }

    /// Backbone plus fusion, computed once per image at inference.
    pub fn encode(&self, image: &ImageRecord) -> Result<(FeatureMaps<T>, FusedFeatureMap<T>)> {
        let features = self.backbone_forward(image)?;
        let fused = self.fuse_features(&features)?;
        Ok((features, fused))
    }

    /// Binary mask of prediction row `i`, decoded on its clipped box.
    pub fn decode_mask(&self, fused: &FusedFeatureMap<T>, out: &HeadOutput<T>, i: usize) -> Result<Mask> {
        let bbox = out.clipped_bbox(i, self.config.image_size);
        decode_mask(
            fused,
            &out.mask_kernel(i),
            &bbox,
            self.config.image_size,
            self.config.mask_threshold,
        )
    }

    pub fn forward_train(&self, image: &ImageRecord, boxes: &BoxState<T>) -> Result<ForwardPass<T>> {
        let x = self.input_tensor(image)?;
        let (features, backbone) = self.backbone.forward(&self.params, &x)?;
        let (fused, fusion) = self.fusion.forward(&self.params, &features)?;
        let (stages, head) = self
            .head
            .forward(&self.params, &features, &boxes.boxes, boxes.t)?
            .into_iter()
            .unzip();
        Ok(ForwardPass {
            features,
            fused,
            stages,
            backbone,
            fusion,
            head,
        })
    }

    /// Parameter gradients given output gradients of every stage and of the fused map.
    pub fn backward(&self, pass: &ForwardPass<T>, d_stages: &[StageGrad<T>], d_fused: &Array3<T>) -> Grads<T> {
        let mut grads = self.params.grads();
        let shapes = pass.features.shapes();
        let caches: Vec<&StageCache<T>> = pass.head.iter().collect();
        let mut d_levels = self.head.backward(&self.params, &mut grads, &caches, d_stages, &shapes);
        let d_fusion = self.fusion.backward(&self.params, &mut grads, &pass.fusion, d_fused);
        for (a, b) in d_levels.iter_mut().zip(&d_fusion) {
            *a += b;
        }
        self.backbone
            .backward(&self.params, &mut grads, &pass.backbone, d_levels);
        grads
    }

    pub(crate) fn header(&self, kind: &str) -> serde_json::Value {
        json!({
            "kind": kind,
            "config": self.config,
            "slots": self
                .params
                .slots()
                .iter()
                .map(|s| json!({"name": s.name, "shape": s.shape}))
                .collect::<Vec<_>>(),
        })
    }

    pub fn params_f64(&self) -> Vec<f64> {
        self.params.values().iter().map(|v| v.as_f64()).collect()
    }

    /// Overwrites all parameters from a flat vector in slot order.
    pub fn set_params_f64(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::arg(format!(
                "parameter vector has {} values, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (d, &s) in self.params.values_mut().iter_mut().zip(values) {
            *d = T::lit(s);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.header("model"), &[self.params_f64()])
    }

    /// Loads a model file or the model inside a training checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let (header, blocks) = read_container(path)?;
        let header = if header["kind"] == "train" {
            &header["model"]
        } else {
            &header
        };
        Self::from_parts(path, header, blocks.first().map(Vec::as_slice))
    }

    /// Rebuilds a model from a checkpoint header and its parameter block.
    pub fn from_parts(path: &Path, header: &serde_json::Value, values: Option<&[f64]>) -> Result<Self> {
        let bad = |reason: String| Error::Load {
            path: path.to_path_buf(),
            reason,
        };
        let mut config: ModelConfig =
            serde_json::from_value(header["config"].clone()).map_err(|e| bad(format!("bad model config: {e}")))?;
        // Weights come from the checkpoint itself.
        config.backbone_weights = None;
        let saved_kind = config.backbone;
        config.backbone = BackboneKind::TinyCnn;
        let mut model = Self::new(config, 0)?;
        model.config.backbone = saved_kind;
        let values = values.ok_or_else(|| bad("missing parameter block".into()))?;
        let expected = model.header("model")["slots"].clone();
        if header["slots"] != expected {
            return Err(bad("parameter layout does not match the model configuration".into()));
        }
        model.set_params_f64(values).map_err(|e| bad(e.to_string()))?;
        Ok(model)
    }

    /// Copies `backbone.*` and `fpn.*` parameters by name from a checkpoint file.
    fn load_backbone_weights(&mut self, path: &Path) -> Result<()> {
        let (header, blocks) = read_container(path)?;
        let bad = |reason: String| Error::Load {
            path: path.to_path_buf(),
            reason,
        };
        let values = blocks.first().ok_or_else(|| bad("missing parameter block".into()))?;
        let slots = header["slots"]
            .as_array()
            .ok_or_else(|| bad("header lists no parameter slots".into()))?;
        let mut offset = 0usize;
        let mut copied = 0usize;
        for s in slots {
            let name = s["name"].as_str().unwrap_or_default();
            let shape: Vec<usize> =
                serde_json::from_value(s["shape"].clone()).map_err(|e| bad(format!("bad slot shape: {e}")))?;
            let n: usize = shape.iter().product();
            let src = values
                .get(offset..offset + n)
                .ok_or_else(|| bad("parameter block shorter than its header".into()))?;
            offset += n;
            if !(name.starts_with("backbone.") || name.starts_with("fpn.")) {
                continue;
            }
            let Some(id) = self.params.find(name) else {
                return Err(bad(format!("unexpected backbone parameter `{name}`")));
            };
            if self.params.slot(id).shape != shape {
                return Err(bad(format!("shape mismatch for `{name}`")));
            }
            for (d, &v) in self.params.get_mut(id).iter_mut().zip(src) {
                *d = T::lit(v);
            }
            copied += 1;
        }
        if copied == 0 {
            return Err(bad("no backbone parameters found".into()));
        }
        log::info!("loaded {copied} backbone tensors from {}", path.display());
        Ok(())
    }
}

/// Convenience for callers holding a plain box list.
pub fn boxes_to_state<T: Scalar>(model: &Model<T>, boxes: &[BBox], t: usize) -> Result<BoxState<T>> {
    let scaler = crate::diffusion::SignalScaler::new(model.config.signal_scale)?;
    BoxState::new(
        crate::diffusion::encode_boxes(boxes, model.config.image_size, scaler)?,
        t,
    )
}
