//! Brute-force AP evaluator written straight from the metric definition, plus
//! random fixtures to compare against.

use std::collections::BTreeMap;

use diffinspect::data::{Annotation, DefectClass, Mask};
use diffinspect::eval::PredictionRecord;
use diffinspect::{BBox, ImageSize};
use rand::Rng;

pub const SIDE: usize = 24;

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut i, mut u) = (0.0, 0.0);
    for y in 0..a.size().height {
        for x in 0..a.size().width {
            let (p, q) = (a.get(x, y), b.get(x, y));
            if p && q {
                i += 1.0;
            }
            if p || q {
                u += 1.0;
            }
        }
    }
    if u == 0.0 {
        0.0
    } else {
        i / u
    }
}

fn lex(a: &[f64; 4], b: &[f64; 4]) -> std::cmp::Ordering {
    for k in 0..4 {
        let o = a[k].total_cmp(&b[k]);
        if o.is_ne() {
            return o;
        }
    }
    std::cmp::Ordering::Equal
}

/// AP of one class at one threshold; `None` when the class has no ground truth.
pub fn reference_ap(preds: &[PredictionRecord], gts: &[Annotation], class: u8, thr: f64, mask: bool) -> Option<f64> {
    let n_gt = gts.iter().filter(|g| g.class.id() == class).count();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &PredictionRecord)> = preds
        .iter()
        .enumerate()
        .filter(|(_, p)| p.class_id == class && p.score >= 0.5)
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_id.cmp(&b.image_id))
            .then(lex(
                &[a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h],
                &[b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h],
            ))
            .then(ia.cmp(ib))
    });
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    for (_, p) in &ranked {
        let mut pick: Option<usize> = None;
        let mut pick_iou = -1.0;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.class.id() != class || g.image_id != p.image_id {
                continue;
            }
            let iou = if mask {
                mask_iou(&p.mask, &g.mask)
            } else {
                box_iou(&p.bbox, &g.bbox)
            };
            if iou >= thr && iou > pick_iou {
                pick = Some(j);
                pick_iou = iou;
            }
        }
        if let Some(j) = pick {
            used[j] = true;
        }
        hits.push(pick.is_some());
    }
    // Precision/recall after each rank.
    let mut pr = Vec::new();
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        pr.push((tp as f64 / (k + 1) as f64, tp as f64 / n_gt as f64));
    }
    let mut total = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let best = pr
            .iter()
            .filter(|(_, rec)| *rec >= r)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    Some(total / 101.0)
}

/// Per-class AP over 0.50..0.95 and their mean over classes with ground truth.
pub fn reference_map(preds: &[PredictionRecord], gts: &[Annotation], mask: bool) -> (BTreeMap<u8, f64>, f64) {
    let mut per = BTreeMap::new();
    for c in 0..5u8 {
        let mut acc = 0.0;
        let mut present = false;
        for i in 0..10 {
            let thr = 0.5 + 0.05 * i as f64;
            if let Some(ap) = reference_ap(preds, gts, c, thr, mask) {
                acc += ap;
                present = true;
            }
        }
        if present {
            per.insert(c, acc / 10.0);
        }
    }
    let map = if per.is_empty() {
        0.0
    } else {
        per.values().sum::<f64>() / per.len() as f64
    };
    (per, map)
}

fn rect_mask(b: &BBox) -> Mask {
    let mut m = Mask::empty(ImageSize::square(SIDE));
    m.fill_rect(b.x as usize, b.y as usize, (b.x + b.w) as usize, (b.y + b.h) as usize);
    m
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(2..12) as f64;
    let h = rng.random_range(2..12) as f64;
    let x = rng.random_range(0..=(SIDE - w as usize)) as f64;
    let y = rng.random_range(0..=(SIDE - h as usize)) as f64;
    BBox::new(x, y, w, h)
}

/// Ground truths and scored predictions with true positives, jittered
/// near-misses, pure false positives, missed objects, tied scores and
/// classes that never occur.
pub fn random_fixture(rng: &mut impl Rng) -> (Vec<Annotation>, Vec<PredictionRecord>) {
    let n_images = rng.random_range(1..=20u64);
    // Leave some classes out entirely.
    let classes: Vec<DefectClass> = DefectClass::ALL
        .iter()
        .copied()
        .filter(|_| rng.random_bool(0.7))
        .collect();
    let classes = if classes.is_empty() {
        vec![DefectClass::SingleBridge]
    } else {
        classes
    };
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let scores = [0.5, 0.6, 0.75, 0.9, 0.95];
    let mut next_id = 1;
    for image_id in 1..=n_images {
        let budget = 50usize;
        let mut made = 0;
        for _ in 0..rng.random_range(0..4) {
            let class = classes[rng.random_range(0..classes.len())];
            let bbox = random_box(rng);
            gts.push(Annotation {
                annotation_id: next_id,
                image_id,
                class,
                bbox,
                mask: rect_mask(&bbox),
            });
            next_id += 1;
            // Hit, near miss, or missed entirely.
            let roll: f64 = rng.random();
            if roll < 0.75 && made < budget {
                let j = |rng: &mut dyn rand::RngCore| rng.random_range(-2i32..=2) as f64;
                let jb = if rng.random_bool(0.5) {
                    bbox
                } else {
                    let x = (bbox.x + j(rng)).clamp(0.0, (SIDE - 2) as f64);
                    let y = (bbox.y + j(rng)).clamp(0.0, (SIDE - 2) as f64);
                    let w = (bbox.w + j(rng)).clamp(1.0, SIDE as f64 - x);
                    let h = (bbox.h + j(rng)).clamp(1.0, SIDE as f64 - y);
                    BBox::new(x, y, w, h)
                };
                let cls = if rng.random_bool(0.1) {
                    classes[rng.random_range(0..classes.len())]
                } else {
                    class
                };
                preds.push(PredictionRecord {
                    image_id,
                    class_id: cls.id(),
                    score: scores[rng.random_range(0..scores.len())],
                    bbox: jb,
                    mask: rect_mask(&jb),
                });
                made += 1;
            }
        }
        for _ in 0..rng.random_range(0..4) {
            if made >= budget {
                break;
            }
            let b = random_box(rng);
            let cls = DefectClass::ALL[rng.random_range(0..5)];
            // Some below the confidence cut.
            let score = if rng.random_bool(0.2) {
                rng.random_range(0.0..0.5)
            } else {
                scores[rng.random_range(0..scores.len())]
            };
            preds.push(PredictionRecord {
                image_id,
                class_id: cls.id(),
                score,
                bbox: b,
                mask: rect_mask(&b),
            });
            made += 1;
        }
    }
    if gts.is_empty() {
        let bbox = random_box(rng);
        gts.push(Annotation {
            annotation_id: next_id,
            image_id: 1,
            class: classes[0],
            bbox,
            mask: rect_mask(&bbox),
        });
    }
    (gts, preds)
}
