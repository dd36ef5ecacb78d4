use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ap::{PredictionRecord, SCORE_THRESHOLD};
use super::iou::iou_box;
use crate::data::ImageRecord;
use crate::diffusion::{ddim_step, sampling_timesteps, BetaSchedule, BoxState, ScheduleConfig};
use crate::error::{Error, Result};
use crate::model::{HeadOutput, Model};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Random boxes drawn at `t = T`.
    pub n_boxes: usize,
    /// Reverse jumps from `T` to 0.
    pub steps: usize,
    pub eta: f64,
    /// Class-wise greedy duplicate suppression.
    pub suppression: bool,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_boxes: 500,
            steps: 1,
            eta: 0.0,
            suppression: true,
            nms_iou: 0.6,
            score_threshold: SCORE_THRESHOLD,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_boxes < 1 {
            return Err(Error::Config("at least one random box is required".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("at least one sampling step is required".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config("eta must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(
                "suppression overlap and score threshold must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// A model bound to a noise schedule and sampling settings.
#[derive(Debug, Clone)]
pub struct Predictor<'a, T> {
    model: &'a Model<T>,
    schedule: BetaSchedule<T>,
    config: InferenceConfig,
}

impl<'a, T: Scalar> Predictor<'a, T> {
    pub fn new(model: &'a Model<T>, schedule: &ScheduleConfig, config: InferenceConfig) -> Result<Self> {
        config.validate()?;
        let schedule = schedule.build()?;
        if config.steps > schedule.steps() {
            return Err(Error::Config(format!(
                "{} sampling steps exceed the {} schedule steps",
                config.steps,
                schedule.steps()
            )));
        }
        Ok(Self {
            model,
            schedule,
            config,
        })
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    pub fn with_boxes(&self, n_boxes: usize) -> Result<Self> {
        let config = InferenceConfig { n_boxes, ..self.config };
        config.validate()?;
        Ok(Self { config, ..self.clone() })
    }

    /// Final head output after walking the random boxes from `T` to 0.
    pub fn denoise(&self, image: &ImageRecord) -> Result<(HeadOutput<T>, crate::model::FusedFeatureMap<T>)> {
        let (features, fused) = self.model.encode(image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(image.image_id);
        let n = self.config.n_boxes;
        let total = self.schedule.steps();
        let noise = Array2::from_shape_fn((n, 4), |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
        let mut x = BoxState::new(noise, total)?;
        let s = T::lit(self.model.config().signal_scale);
        let mut last = None;
        for (_, t_prev) in sampling_timesteps(total, self.config.steps)? {
            let out = self.model.head_forward(&features, &x)?;
            if t_prev > 0 {
                let x0 = out.box_pred.mapv(|v| v.max(-s).min(s));
                let z = (self.config.eta > 0.0)
                    .then(|| Array2::from_shape_fn((n, 4), |_| T::lit(rng.sample::<f64, _>(StandardNormal))));
                x = ddim_step(
                    &x,
                    x0.view(),
                    t_prev,
                    &self.schedule,
                    T::lit(self.config.eta),
                    z.as_ref().map(|z| z.view()),
                )?;
            }
            last = Some(out);
        }
        Ok((last.expect("at least one step"), fused))
    }

    /// Scored, suppressed detections with decoded masks for one image.
    pub fn predict(&self, image: &ImageRecord) -> Result<Vec<PredictionRecord>> {
        let (out, fused) = self.denoise(image)?;
        let size = self.model.config().image_size;
        let labels = out.labels();
        let mut order: Vec<usize> = (0..out.len())
            .filter(|&i| out.scores[i] >= self.config.score_threshold)
            .collect();
        order.sort_by(|&a, &b| out.scores[b].total_cmp(&out.scores[a]).then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::new();
        for i in order {
            let b = out.clipped_bbox(i, size);
            let dup = self.config.suppression
                && kept
                    .iter()
                    .any(|&k| labels[k] == labels[i] && iou_box(&out.clipped_bbox(k, size), &b) > self.config.nms_iou);
            if !dup {
                kept.push(i);
            }
        }
        kept.into_iter()
            .map(|i| {
                Ok(PredictionRecord {
                    image_id: image.image_id,
                    class_id: labels[i] as u8,
                    score: out.scores[i],
                    bbox: out.clipped_bbox(i, size),
                    mask: self.model.decode_mask(&fused, &out, i)?,
                })
            })
            .collect()
    }
}

/// Predictions for every image, in image order.
pub fn run_inference<T: Scalar>(
    predictor: &Predictor<'_, T>,
    images: &[&ImageRecord],
) -> Result<Vec<PredictionRecord>> {
    let mut all = Vec::new();
    for img in images {
        all.extend(predictor.predict(img)?);
    }
    Ok(all)
}
