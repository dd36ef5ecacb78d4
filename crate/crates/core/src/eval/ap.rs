use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::iou::{iou_box, iou_mask};
use crate::data::{Annotation, Mask, Rle};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Detections below this confidence are dropped before ranking.
pub const SCORE_THRESHOLD: f64 = 0.5;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// One detection with its mask at image resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub class_id: u8,
    pub score: f64,
    pub bbox: BBox,
    #[serde(rename = "segmentation", with = "mask_as_rle")]
    pub mask: Mask,
}

mod mask_as_rle {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Mask, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.to_rle().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Mask, D::Error> {
        let rle = Rle::deserialize(d)?;
        Mask::from_rle(&rle).map_err(serde::de::Error::custom)
    }
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::arg(format!("score {} outside [0, 1]", self.score)));
        }
        if self.class_id as usize >= crate::data::NUM_CLASSES {
            return Err(Error::arg(format!("class id {} outside 0..4", self.class_id)));
        }
        if !self.bbox.is_finite() || self.bbox.w <= 0.0 || self.bbox.h <= 0.0 {
            return Err(Error::arg("prediction box is not a valid rectangle"));
        }
        Ok(())
    }

    /// A ground-truth annotation restated as a confident prediction.
    pub fn from_annotation(a: &Annotation, score: f64) -> Self {
        Self {
            image_id: a.image_id,
            class_id: a.class.id(),
            score,
            bbox: a.bbox,
            mask: a.mask.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(rename = "bbox")]
    BBox,
    Mask,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bbox" => Ok(Self::BBox),
            "mask" => Ok(Self::Mask),
            other => Err(Error::arg(format!("unknown task `{other}`"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BBox => "bbox",
            Self::Mask => "mask",
        })
    }
}

/// Per-class AP averaged over the IoU grid, their mean, and the per-threshold means.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ApResult {
    pub per_class_ap: BTreeMap<u8, f64>,
    pub map: f64,
    /// Mean over classes at each threshold, keyed `"0.50"` … `"0.95"`.
    pub per_iou: BTreeMap<String, f64>,
}

fn overlap(task: Task, p: &PredictionRecord, g: &Annotation) -> f64 {
    match task {
        Task::BBox => iou_box(&p.bbox, &g.bbox),
        // Undefined overlap counts as no match.
        Task::Mask => iou_mask(&p.mask, &g.mask).unwrap_or(0.0),
    }
}

/// Surviving predictions of one class, ranked, with their overlaps against
/// same-image ground truths of that class.
struct Ranked {
    n_gt: usize,
    /// For each ranked prediction: `(gt index, iou)` candidates.
    candidates: Vec<Vec<(usize, f64)>>,
}

fn rank(preds: &[PredictionRecord], gts: &[Annotation], class_id: u8, task: Task) -> Ranked {
    let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].class.id() == class_id).collect();
    let mut order: Vec<usize> = (0..preds.len())
        .filter(|&i| preds[i].class_id == class_id && preds[i].score >= SCORE_THRESHOLD)
        .collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a], &preds[b]);
        pb.score
            .total_cmp(&pa.score)
            .then(pa.image_id.cmp(&pb.image_id))
            .then_with(|| {
                pa.bbox
                    .to_array()
                    .iter()
                    .zip(pb.bbox.to_array())
                    .map(|(x, y)| x.total_cmp(&y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    let candidates = order
        .iter()
        .map(|&i| {
            let p = &preds[i];
            gt_idx
                .iter()
                .filter(|&&g| gts[g].image_id == p.image_id)
                .map(|&g| (g, overlap(task, p, &gts[g])))
                .collect()
        })
        .collect();
    Ranked {
        n_gt: gt_idx.len(),
        candidates,
    }
}

fn ap_at(r: &Ranked, threshold: f64) -> f64 {
    if r.n_gt == 0 {
        return 0.0;
    }
    let mut taken = std::collections::HashSet::new();
    let mut tp = Vec::with_capacity(r.candidates.len());
    for cands in &r.candidates {
        let mut best: Option<(usize, f64)> = None;
        for &(g, iou) in cands {
            if iou >= threshold && !taken.contains(&g) && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken.insert(g);
        }
        tp.push(best.is_some());
    }
    interpolated_ap(&tp, r.n_gt)
}

/// 101-point interpolated area under the precision envelope.
pub(crate) fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / n_gt as f64);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP of one class at one IoU threshold.
pub fn compute_ap(preds: &[PredictionRecord], gts: &[Annotation], class_id: u8, iou_threshold: f64, task: Task) -> f64 {
    ap_at(&rank(preds, gts, class_id, task), iou_threshold)
}

/// Per-class AP averaged over 0.50:0.95 and its mean over the classes present in `gts`.
pub fn compute_map(preds: &[PredictionRecord], gts: &[Annotation], task: Task) -> ApResult {
    let mut classes: Vec<u8> = gts.iter().map(|g| g.class.id()).collect();
    classes.sort_unstable();
    classes.dedup();
    let thresholds = iou_thresholds();
    let mut per_class_ap = BTreeMap::new();
    let mut per_iou_sum = [0.0; 10];
    for &c in &classes {
        let r = rank(preds, gts, c, task);
        let aps: Vec<f64> = thresholds.iter().map(|&t| ap_at(&r, t)).collect();
        for (s, a) in per_iou_sum.iter_mut().zip(&aps) {
            *s += a;
        }
        per_class_ap.insert(c, aps.iter().sum::<f64>() / aps.len() as f64);
    }
    let n = classes.len().max(1) as f64;
    let map = if classes.is_empty() {
        0.0
    } else {
        per_class_ap.values().sum::<f64>() / n
    };
    let per_iou = thresholds
        .iter()
        .zip(per_iou_sum)
        .map(|(t, s)| (format!("{t:.2}"), s / n))
        .collect();
    ApResult {
        per_class_ap,
        map,
        per_iou,
    }
}
