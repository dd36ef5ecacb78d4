use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ap::{compute_map, ApResult, Task};
use super::infer::{InferenceConfig, Predictor};
use super::timing::{timed_inference, TimingResult};
use crate::data::{Annotation, ImageRecord};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Box and mask metrics plus timing for one inference setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bbox: ApResult,
    pub mask: ApResult,
    pub timing: TimingResult,
    pub inference: InferenceConfig,
    pub predictions: usize,
}

pub fn evaluate<T: Scalar>(
    predictor: &Predictor<'_, T>,
    images: &[&ImageRecord],
    gts: &[Annotation],
) -> Result<EvalReport> {
    let (preds, timing) = timed_inference(predictor, images)?;
    Ok(EvalReport {
        bbox: compute_map(&preds, gts, Task::BBox),
        mask: compute_map(&preds, gts, Task::Mask),
        timing,
        inference: *predictor.config(),
        predictions: preds.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_boxes: usize,
    pub map_bbox: f64,
    pub map_mask: f64,
    pub seconds_per_image: f64,
    /// Set when this count failed; the metrics are then NaN.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

pub const SWEEP_CSV_HEADER: &str = "n_boxes,map_bbox,map_mask,seconds_per_image";

/// Evaluates each random-box count; rows come back sorted by descending count.
/// A failing count yields a row carrying the error and the sweep continues.
pub fn sweep_random_boxes<T: Scalar>(
    predictor: &Predictor<'_, T>,
    images: &[&ImageRecord],
    gts: &[Annotation],
    counts: &[usize],
) -> Result<Vec<SweepRow>> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::arg("box counts must be a nonempty list of positive integers"));
    }
    let mut counts = counts.to_vec();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    counts.dedup();
    Ok(counts
        .into_iter()
        .map(|n| {
            let report = predictor.with_boxes(n).and_then(|p| evaluate(&p, images, gts));
            match report {
                Ok(r) => SweepRow {
                    n_boxes: n,
                    map_bbox: r.bbox.map,
                    map_mask: r.mask.map,
                    seconds_per_image: r.timing.seconds_per_image,
                    error: None,
                },
                Err(e) => {
                    log::error!("sweep at {n} boxes failed: {e}");
                    SweepRow {
                        n_boxes: n,
                        map_bbox: f64::NAN,
                        map_mask: f64::NAN,
                        seconds_per_image: f64::NAN,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.n_boxes, r.map_bbox, r.map_mask, r.seconds_per_image);
    }
    s
}

/// Parses a sweep CSV written by [`sweep_csv`].
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SWEEP_CSV_HEADER) {
        return Err(Error::arg("sweep CSV header mismatch"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::arg(format!("bad sweep row `{l}`")))
            };
            Ok(SweepRow {
                n_boxes: num(0)? as usize,
                map_bbox: num(1)?,
                map_mask: num(2)?,
                seconds_per_image: num(3)?,
                error: None,
            })
        })
        .collect()
}
