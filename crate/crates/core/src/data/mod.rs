//! Defect dataset model: classes, image records, annotations and splits.

mod augment;
mod coco;
mod convert;
mod mask;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use augment::horizontal_flip;
pub use coco::{load_dataset, save_dataset, CocoFile, SplitManifest};
pub use convert::{convert_images, ConversionReport};
pub use mask::{Mask, Rle};
pub use synth::{synth_dataset, SynthSpec, CORPUS_TRAIN_MIX};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};

pub const NUM_CLASSES: usize = 5;

/// The five stochastic-defect families of the inspection corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum DefectClass {
    ThinBridge = 0,
    SingleBridge = 1,
    MultiBridgeNonHorizontal = 2,
    MultiBridgeHorizontal = 3,
    LineCollapse = 4,
}

impl DefectClass {
    pub const ALL: [DefectClass; NUM_CLASSES] = [
        DefectClass::ThinBridge,
        DefectClass::SingleBridge,
        DefectClass::MultiBridgeNonHorizontal,
        DefectClass::MultiBridgeHorizontal,
        DefectClass::LineCollapse,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_id(id: u64) -> Option<Self> {
        Self::ALL.get(usize::try_from(id).ok()?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::ThinBridge => "thin bridge",
            DefectClass::SingleBridge => "single bridge",
            DefectClass::MultiBridgeNonHorizontal => "multi bridge (non-horizontal)",
            DefectClass::MultiBridgeHorizontal => "multi bridge (horizontal)",
            DefectClass::LineCollapse => "line collapse",
        }
    }
}

impl From<DefectClass> for u8 {
    fn from(c: DefectClass) -> u8 {
        c.id()
    }
}

impl TryFrom<u8> for DefectClass {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Self::from_id(v as u64).ok_or_else(|| format!("class id {v} outside 0..4"))
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(rename = "val")]
    Validation,
}

/// One grayscale image. `pixels` is indexed `[row, column]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub pixels: Array2<u8>,
    pub source_path: String,
}

impl ImageRecord {
    pub fn new(image_id: u64, pixels: Array2<u8>, source_path: impl Into<String>) -> Result<Self> {
        if pixels.nrows() == 0 || pixels.ncols() == 0 {
            return Err(Error::arg(format!("image {image_id} has zero size")));
        }
        Ok(Self {
            image_id,
            pixels,
            source_path: source_path.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.width(), self.height())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub annotation_id: u64,
    pub image_id: u64,
    pub class: DefectClass,
    pub bbox: BBox,
    pub mask: Mask,
}

impl Annotation {
    /// Checks the annotation against its image; returns human-readable problems.
    pub fn problems(&self, size: ImageSize) -> Vec<String> {
        let id = self.annotation_id;
        let mut out = Vec::new();
        if !self.bbox.is_finite() || !self.bbox.within(size) {
            out.push(format!(
                "annotation {id}: bbox {:?} not inside {}x{} image",
                self.bbox.to_array(),
                size.width,
                size.height
            ));
        }
        if self.mask.size() != size {
            out.push(format!("annotation {id}: mask size differs from image size"));
            return out;
        }
        if self.mask.area() == 0 {
            out.push(format!("annotation {id}: empty mask"));
        }
        let [x1, y1, x2, y2] = self.bbox.xyxy();
        let outside = self.mask.bits().iter().enumerate().any(|(i, &b)| {
            let (x, y) = ((i % size.width) as f64, (i / size.width) as f64);
            b && (x < x1 - 1.0 || x + 1.0 > x2 + 1.0 || y < y1 - 1.0 || y + 1.0 > y2 + 1.0)
        });
        if outside {
            out.push(format!("annotation {id}: mask extends beyond bbox"));
        }
        out
    }
}

/// Images plus annotations plus the train/validation partition. Immutable once built.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub train_ids: BTreeSet<u64>,
    pub val_ids: BTreeSet<u64>,
}

impl Dataset {
    /// Builds a dataset and checks every invariant, collecting all violations.
    pub fn new(
        images: Vec<ImageRecord>,
        annotations: Vec<Annotation>,
        train_ids: BTreeSet<u64>,
        val_ids: BTreeSet<u64>,
    ) -> Result<Self> {
        let ds = Self {
            images,
            annotations,
            train_ids,
            val_ids,
        };
        let problems = ds.problems();
        if problems.is_empty() {
            Ok(ds)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut sizes = HashMap::new();
        for img in &self.images {
            if sizes.insert(img.image_id, img.size()).is_some() {
                out.push(format!("duplicate image id {}", img.image_id));
            }
        }
        let mut seen = BTreeSet::new();
        for a in &self.annotations {
            if !seen.insert(a.annotation_id) {
                out.push(format!("duplicate annotation id {}", a.annotation_id));
            }
            match sizes.get(&a.image_id) {
                None => out.push(format!(
                    "annotation {} references unknown image_id {}",
                    a.annotation_id, a.image_id
                )),
                Some(&size) => out.extend(a.problems(size)),
            }
        }
        for id in self.train_ids.intersection(&self.val_ids) {
            out.push(format!("image {id} is in both train and validation splits"));
        }
        for id in self.train_ids.iter().chain(&self.val_ids) {
            if !sizes.contains_key(id) {
                out.push(format!("split references unknown image_id {id}"));
            }
        }
        out
    }

    pub fn split_ids(&self, split: Split) -> &BTreeSet<u64> {
        match split {
            Split::Train => &self.train_ids,
            Split::Validation => &self.val_ids,
        }
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == id)
    }

    /// Images of a split in id order.
    pub fn split_images(&self, split: Split) -> Vec<&ImageRecord> {
        let ids = self.split_ids(split);
        let mut v: Vec<&ImageRecord> = self.images.iter().filter(|i| ids.contains(&i.image_id)).collect();
        v.sort_by_key(|i| i.image_id);
        v
    }

    /// Annotations grouped by image id, preserving insertion order.
    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut map: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }

    pub fn annotations_for(&self, image_id: u64) -> Vec<&Annotation> {
        self.annotations.iter().filter(|a| a.image_id == image_id).collect()
    }

    /// Returns a copy restricted to one split; the other split becomes empty.
    pub fn subset(&self, split: Split) -> Dataset {
        let ids = self.split_ids(split).clone();
        let images = self
            .images
            .iter()
            .filter(|i| ids.contains(&i.image_id))
            .cloned()
            .collect();
        let annotations = self
            .annotations
            .iter()
            .filter(|a| ids.contains(&a.image_id))
            .cloned()
            .collect();
        let (train_ids, val_ids) = match split {
            Split::Train => (ids, BTreeSet::new()),
            Split::Validation => (BTreeSet::new(), ids),
        };
        Dataset {
            images,
            annotations,
            train_ids,
            val_ids,
        }
    }
}

/// Annotation counts per class id (all five ids present) restricted to a split.
pub fn class_histogram(dataset: &Dataset, split: Split) -> BTreeMap<u8, usize> {
    let ids = dataset.split_ids(split);
    let mut hist: BTreeMap<u8, usize> = DefectClass::ALL.iter().map(|c| (c.id(), 0)).collect();
    for a in dataset.annotations.iter().filter(|a| ids.contains(&a.image_id)) {
        *hist.entry(a.class.id()).or_default() += 1;
    }
    hist
}
