use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use super::loss::{giou, LossConfig};
use crate::data::Annotation;
use crate::error::{Error, Result};
use crate::geometry::ImageSize;
use crate::model::HeadOutput;
use crate::scalar::{sigmoid, Scalar};

/// Prediction-to-ground-truth assignment for one image.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    /// `(prediction, ground truth)`, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, n_pred: usize) -> Self {
        pairs.sort_unstable();
        let mut used = vec![false; n_pred];
        for &(p, _) in &pairs {
            used[p] = true;
        }
        let unmatched = (0..n_pred).filter(|&p| !used[p]).collect();
        Self { pairs, unmatched }
    }

    /// Sum of `cost[(p, g)]` over the pairs.
    pub fn cost(&self, cost: &Array2<f64>) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost[[p, g]]).sum()
    }
}

/// Assignment strategy used to pick positive predictions during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Matcher {
    /// Minimum-cost one-to-one assignment.
    #[default]
    Hungarian,
    /// Each ground truth takes its `k` cheapest predictions, with `k` derived
    /// from the sum of its top overlaps; a prediction keeps only its cheapest ground truth.
    DynamicK,
}

impl FromStr for Matcher {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hungarian" => Ok(Self::Hungarian),
            "dynamic_k" => Ok(Self::DynamicK),
            other => Err(Error::Config(format!("unknown matcher `{other}`"))),
        }
    }
}

impl fmt::Display for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hungarian => "hungarian",
            Self::DynamicK => "dynamic_k",
        })
    }
}

/// Stand-in for non-finite costs so the solver always makes progress.
const UNUSABLE_COST: f64 = 1e15;

/// Minimum-cost assignment on a `predictions × ground truths` matrix. Every
/// column is matched when there are at least as many rows, and vice versa.
/// Non-finite entries are treated as very expensive rather than rejected.
pub fn hungarian(cost: &Array2<f64>) -> MatchResult {
    let (n_pred, n_gt) = cost.dim();
    if n_pred == 0 || n_gt == 0 {
        return MatchResult::from_pairs(Vec::new(), n_pred);
    }
    let cost = cost.mapv(|c| if c.is_finite() { c } else { UNUSABLE_COST });
    let pairs = if n_gt <= n_pred {
        solve(n_gt, n_pred, |r, c| cost[[c, r]])
            .into_iter()
            .map(|(g, p)| (p, g))
            .collect()
    } else {
        solve(n_pred, n_gt, |r, c| cost[[r, c]])
    };
    MatchResult::from_pairs(pairs, n_pred)
}

/// Shortest augmenting path with row/column potentials; requires `n <= m`.
/// Returns `(row, column)` for every row.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row matched to column j (1-based, 0 = free)
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

/// Matching cost `w_cls·(1−p_class) + w_l1·‖Δbox‖₁ + w_giou·(1−GIoU)` with boxes
/// normalized by the image size for the L1 term.
pub fn cost_matrix<T: Scalar>(
    out: &HeadOutput<T>,
    gts: &[Annotation],
    image: ImageSize,
    cfg: &LossConfig,
) -> Array2<f64> {
    let (iw, ih) = (image.width as f64, image.height as f64);
    Array2::from_shape_fn((out.len(), gts.len()), |(p, g)| {
        let gt = &gts[g];
        let prob = sigmoid(out.class_logits[[p, gt.class.index()]]).as_f64();
        let pb = out.bbox(p);
        let (pcx, pcy) = pb.center();
        let (gcx, gcy) = gt.bbox.center();
        let l1 = (pcx - gcx).abs() / iw
            + (pcy - gcy).abs() / ih
            + (pb.w - gt.bbox.w).abs() / iw
            + (pb.h - gt.bbox.h).abs() / ih;
        cfg.w_cls * (1.0 - prob) + cfg.w_l1 * l1 + cfg.w_giou * (1.0 - giou(&pb, &gt.bbox))
    })
}

/// One-to-one minimum-cost matching of predictions to ground truths.
pub fn match_predictions<T: Scalar>(
    out: &HeadOutput<T>,
    gts: &[Annotation],
    image: ImageSize,
    cfg: &LossConfig,
) -> MatchResult {
    hungarian(&cost_matrix(out, gts, image, cfg))
}

/// Number of top overlaps summed to size each ground truth's positive set.
const DYNAMIC_K_CANDIDATES: usize = 5;
/// Added to the cost of predictions whose center lies outside the ground truth.
const OUTSIDE_PENALTY: f64 = 1e4;

/// One-to-many assignment; see [`Matcher::DynamicK`].
pub fn dynamic_k_match<T: Scalar>(
    out: &HeadOutput<T>,
    gts: &[Annotation],
    image: ImageSize,
    cfg: &LossConfig,
) -> MatchResult {
    let n_pred = out.len();
    if n_pred == 0 || gts.is_empty() {
        return MatchResult::from_pairs(Vec::new(), n_pred);
    }
    let mut cost = cost_matrix(out, gts, image, cfg);
    let boxes: Vec<_> = (0..n_pred).map(|p| out.bbox(p)).collect();
    for (g, gt) in gts.iter().enumerate() {
        let [x1, y1, x2, y2] = gt.bbox.xyxy();
        for (p, b) in boxes.iter().enumerate() {
            let (cx, cy) = b.center();
            if !(cx > x1 && cx < x2 && cy > y1 && cy < y2) {
                cost[[p, g]] += OUTSIDE_PENALTY;
            }
        }
    }
    // best[p] = (cost, gt) of the cheapest ground truth that selected p
    let mut best: Vec<Option<(f64, usize)>> = vec![None; n_pred];
    for (g, gt) in gts.iter().enumerate() {
        let mut ious: Vec<f64> = boxes.iter().map(|b| b.iou(&gt.bbox)).collect();
        ious.sort_by(|a, b| b.total_cmp(a));
        let k = (ious.iter().take(DYNAMIC_K_CANDIDATES).sum::<f64>() as usize).clamp(1, n_pred);
        let mut order: Vec<usize> = (0..n_pred).collect();
        order.sort_by(|&a, &b| cost[[a, g]].total_cmp(&cost[[b, g]]).then(a.cmp(&b)));
        for &p in &order[..k] {
            let c = cost[[p, g]];
            if best[p].is_none_or(|(bc, _)| c < bc) {
                best[p] = Some((c, g));
            }
        }
    }
    // A ground truth that lost all its predictions to cheaper claims keeps its best one.
    for g in 0..gts.len() {
        if best.iter().any(|b| matches!(b, Some((_, bg)) if *bg == g)) {
            continue;
        }
        let p = (0..n_pred)
            .min_by(|&a, &b| cost[[a, g]].total_cmp(&cost[[b, g]]))
            .expect("nonempty");
        best[p] = Some((cost[[p, g]], g));
    }
    let pairs = best
        .iter()
        .enumerate()
        .filter_map(|(p, b)| b.map(|(_, g)| (p, g)))
        .collect();
    MatchResult::from_pairs(pairs, n_pred)
}

pub fn assign<T: Scalar>(
    matcher: Matcher,
    out: &HeadOutput<T>,
    gts: &[Annotation],
    image: ImageSize,
    cfg: &LossConfig,
) -> MatchResult {
    match matcher {
        Matcher::Hungarian => match_predictions(out, gts, image, cfg),
        Matcher::DynamicK => dynamic_k_match(out, gts, image, cfg),
    }
}
