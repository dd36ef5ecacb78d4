use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::ap::PredictionRecord;
use super::infer::Predictor;
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingResult {
    pub seconds_per_image: f64,
    pub batch_count: usize,
    pub box_count: usize,
    pub steps: usize,
}

/// Anything that can be timed per image at batch size one.
pub trait InferenceModel {
    /// Runs the full per-image computation.
    fn infer(&self, image: &ImageRecord) -> Result<Vec<PredictionRecord>>;
    fn box_count(&self) -> usize;
    fn steps(&self) -> usize;
}

impl<T: Scalar> InferenceModel for Predictor<'_, T> {
    fn infer(&self, image: &ImageRecord) -> Result<Vec<PredictionRecord>> {
        self.predict(image)
    }

    fn box_count(&self) -> usize {
        self.config().n_boxes
    }

    fn steps(&self) -> usize {
        self.config().steps
    }
}

/// Runs every image once after an untimed warm-up pass on the first, timing
/// only the model call with a monotonic clock.
pub fn timed_inference<M: InferenceModel + ?Sized>(
    model: &M,
    images: &[&ImageRecord],
) -> Result<(Vec<PredictionRecord>, TimingResult)> {
    let first = images
        .first()
        .ok_or_else(|| Error::arg("cannot time inference on an empty dataset"))?;
    model.infer(first)?;
    let mut total = Duration::ZERO;
    let mut preds = Vec::new();
    for img in images {
        let start = Instant::now();
        let p = model.infer(img)?;
        total += start.elapsed();
        preds.extend(p);
    }
    Ok((
        preds,
        TimingResult {
            seconds_per_image: total.as_secs_f64() / images.len() as f64,
            batch_count: images.len(),
            box_count: model.box_count(),
            steps: model.steps(),
        },
    ))
}

pub fn measure_inference_time<M: InferenceModel + ?Sized>(model: &M, images: &[&ImageRecord]) -> Result<TimingResult> {
    Ok(timed_inference(model, images)?.1)
}
