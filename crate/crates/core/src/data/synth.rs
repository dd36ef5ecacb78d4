//! Deterministic toy defect generator: vertical line gratings with one planted
//! defect per image whose box and mask are exact by construction.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Annotation, Dataset, DefectClass, ImageRecord, Mask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::ImageSize;

/// Training-split class proportions of the inspection corpus (240/240/80/160/200 of 920).
pub const CORPUS_TRAIN_MIX: [f64; NUM_CLASSES] =
    [240.0 / 920.0, 240.0 / 920.0, 80.0 / 920.0, 160.0 / 920.0, 200.0 / 920.0];

const BACKGROUND: u8 = 50;
const LINE: u8 = 160;
const BRIDGE: u8 = 230;
const FALLEN: u8 = 200;
const NOISE: i32 = 10;
const MIN_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub class_mix: [f64; NUM_CLASSES],
    pub image_size: usize,
    pub seed: u64,
    /// Fraction of each class routed to the validation split.
    pub val_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 200,
            class_mix: [0.2; NUM_CLASSES],
            image_size: 128,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

/// Largest-remainder apportionment of `count` over the proportions; ties go to the lower class id.
fn apportion(count: usize, mix: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let exact: Vec<f64> = mix.iter().map(|p| p * count as f64).collect();
    let mut out = [0usize; NUM_CLASSES];
    for (o, e) in out.iter_mut().zip(&exact) {
        *o = e.floor() as usize;
    }
    let mut rest = count - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        out[c] += 1;
        rest -= 1;
    }
    out
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.class_mix.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::arg("class proportions must be nonnegative"));
    }
    let total: f64 = spec.class_mix.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("class proportions sum to {total}, not 1")));
    }
    if spec.image_size < MIN_SIZE {
        return Err(Error::arg(format!(
            "image size {} below the minimum grating size {MIN_SIZE}",
            spec.image_size
        )));
    }
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(Error::arg("validation fraction must be in [0, 1)"));
    }

    let counts = apportion(spec.count, &spec.class_mix);
    let mut classes: Vec<DefectClass> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(DefectClass::ALL[c], n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    classes.shuffle(&mut rng);

    let size = ImageSize::square(spec.image_size);
    let mut images = Vec::with_capacity(spec.count);
    let mut annotations = Vec::with_capacity(spec.count);
    for (i, &class) in classes.iter().enumerate() {
        let id = i as u64 + 1;
        let mut img_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        img_rng.set_stream(id);
        let (pixels, mask) = render(class, size, &mut img_rng);
        let bbox = mask.bounding_box().expect("rendered defects are nonempty");
        images.push(ImageRecord::new(id, pixels, format!("synth_{id:06}.png"))?);
        annotations.push(Annotation {
            annotation_id: id,
            image_id: id,
            class,
            bbox,
            mask,
        });
    }

    let mut train_ids = BTreeSet::new();
    let mut val_ids = BTreeSet::new();
    for class in DefectClass::ALL {
        let ids: Vec<u64> = annotations
            .iter()
            .filter(|a| a.class == class)
            .map(|a| a.image_id)
            .collect();
        let n_val = (ids.len() as f64 * spec.val_fraction).round() as usize;
        let cut = ids.len() - n_val;
        train_ids.extend(&ids[..cut]);
        val_ids.extend(&ids[cut..]);
    }
    Dataset::new(images, annotations, train_ids, val_ids)
}

struct Grating {
    period: usize,
    line: usize,
    /// Left edge of every line, possibly negative.
    starts: Vec<i64>,
}

impl Grating {
    fn new(side: usize, rng: &mut impl Rng) -> Self {
        let period = (side / 4).clamp(8, 64);
        let line = period / 2;
        let phase = rng.random_range(0..period) as i64;
        let starts = (0..)
            .map(|k| phase - period as i64 + k * period as i64)
            .take_while(|&x| x < side as i64)
            .collect();
        Self { period, line, starts }
    }

    fn gap(&self) -> usize {
        self.period - self.line
    }

    /// `(x0, x1)` of gaps lying entirely inside `[1, side - 1)`.
    fn inner_gaps(&self, side: usize) -> Vec<(usize, usize)> {
        self.starts
            .iter()
            .map(|&s| (s + self.line as i64, s + self.period as i64))
            .filter(|&(a, b)| a >= 1 && b < side as i64)
            .map(|(a, b)| (a as usize, b as usize))
            .collect()
    }

    fn is_line(&self, x: usize) -> bool {
        self.starts
            .iter()
            .any(|&s| (x as i64) >= s && (x as i64) < s + self.line as i64)
    }
}

fn render(class: DefectClass, size: ImageSize, rng: &mut ChaCha8Rng) -> (Array2<u8>, Mask) {
    let side = size.width;
    let g = Grating::new(side, rng);
    let p = g.period;
    let mut canvas = Array2::from_shape_fn((side, side), |(_, x)| if g.is_line(x) { LINE } else { BACKGROUND });
    let mut mask = Mask::empty(size);
    let gaps = g.inner_gaps(side);
    let rect = |canvas: &mut Array2<u8>, mask: &mut Mask, x0: usize, y0: usize, x1: usize, y1: usize, v: u8| {
        canvas.slice_mut(ndarray::s![y0..y1, x0..x1]).fill(v);
        mask.fill_rect(x0, y0, x1, y1);
    };
    let rand_y = |rng: &mut ChaCha8Rng, h: usize| rng.random_range(1..=side - 1 - h);

    match class {
        DefectClass::ThinBridge | DefectClass::SingleBridge => {
            let (lo, hi) = if class == DefectClass::ThinBridge {
                ((p / 10).max(2), (p / 6).max(2))
            } else {
                ((p / 3).max(3), (p / 2).max(4))
            };
            let h = rng.random_range(lo..=hi);
            let (x0, x1) = gaps[rng.random_range(0..gaps.len())];
            let y = rand_y(rng, h);
            rect(&mut canvas, &mut mask, x0, y, x1, y + h, BRIDGE);
        }
        DefectClass::MultiBridgeHorizontal | DefectClass::MultiBridgeNonHorizontal => {
            let max_span = gaps.len().min(3);
            let n = rng.random_range(2..=max_span.max(2)).min(gaps.len());
            let first = rng.random_range(0..=gaps.len() - n);
            let run = &gaps[first..first + n];
            if class == DefectClass::MultiBridgeHorizontal {
                let h = rng.random_range((p / 5).max(2)..=(p / 3).max(3));
                let y = rand_y(rng, h);
                rect(&mut canvas, &mut mask, run[0].0, y, run[n - 1].1, y + h, BRIDGE);
            } else {
                let h = rng.random_range((p / 6).max(2)..=(p / 4).max(2));
                let step = h + rng.random_range(1..=(p / 8).max(1));
                let span = h + step * (n - 1);
                let top = rand_y(rng, span);
                let downward = rng.random_bool(0.5);
                for (k, &(x0, x1)) in run.iter().enumerate() {
                    let y = if downward {
                        top + k * step
                    } else {
                        top + (n - 1 - k) * step
                    };
                    rect(&mut canvas, &mut mask, x0, y, x1, y + h, BRIDGE);
                }
            }
        }
        DefectClass::LineCollapse => {
            // Line segment knocked sideways by half a gap; the disturbed span is the defect.
            let shift = g.gap() / 2;
            let candidates: Vec<usize> = g
                .starts
                .iter()
                .filter(|&&s| s >= 1 && s as usize + g.line + shift < side)
                .map(|&s| s as usize)
                .collect();
            let x = candidates[rng.random_range(0..candidates.len())];
            let h = rng.random_range(p.min(side - 4)..=(2 * p).min(side - 4));
            let y = rand_y(rng, h);
            let x1 = x + g.line + shift;
            rect(&mut canvas, &mut mask, x, y, x1, y + h, BACKGROUND);
            canvas.slice_mut(ndarray::s![y..y + h, x + shift..x1]).fill(FALLEN);
        }
    }

    canvas.mapv_inplace(|v| (v as i32 + rng.random_range(-NOISE..=NOISE)).clamp(0, 255) as u8);
    (canvas, mask)
}
