//! COCO-style annotation JSON with uncompressed row-major run-length masks.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Annotation, Dataset, DefectClass, ImageRecord, Mask, Rle};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub segmentation: Rle,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
}

impl CocoFile {
    pub fn categories() -> Vec<CocoCategory> {
        DefectClass::ALL
            .iter()
            .map(|c| CocoCategory {
                id: c.id() as u64,
                name: c.name().to_string(),
            })
            .collect()
    }

    pub fn from_dataset(ds: &Dataset) -> Self {
        let images = ds
            .images
            .iter()
            .map(|img| CocoImage {
                id: img.image_id,
                file_name: file_name_for(img),
                width: img.width(),
                height: img.height(),
            })
            .collect();
        let annotations = ds
            .annotations
            .iter()
            .map(|a| CocoAnnotation {
                id: a.annotation_id,
                image_id: a.image_id,
                category_id: a.class.id() as u64,
                bbox: a.bbox.to_array(),
                segmentation: a.mask.to_rle(),
                area: a.mask.area() as f64,
            })
            .collect();
        Self {
            images,
            annotations,
            categories: Self::categories(),
        }
    }
}

fn file_name_for(img: &ImageRecord) -> String {
    Path::new(&img.source_path)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("image_{:06}.png", img.image_id))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub(crate) fn load_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), gray.into_raw()).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads an annotation file and its images.
///
/// The train/validation split is read from `split.json` next to the annotation
/// file; without it every image is a training image.
pub fn load_dataset(annotation_file: &Path, image_dir: &Path) -> Result<Dataset> {
    let coco: CocoFile = read_json(annotation_file)?;

    let known: BTreeSet<u64> = coco.images.iter().map(|i| i.id).collect();
    let mut problems = Vec::new();
    for a in &coco.annotations {
        if !known.contains(&a.image_id) {
            problems.push(format!(
                "annotation {} references unknown image_id {}",
                a.id, a.image_id
            ));
        }
        if DefectClass::from_id(a.category_id).is_none() {
            problems.push(format!(
                "annotation {} has class_id {} outside 0..4",
                a.id, a.category_id
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let split_path = annotation_file.with_file_name("split.json");
    let (train_ids, val_ids) = if split_path.exists() {
        let m: SplitManifest = read_json(&split_path)?;
        (m.train.into_iter().collect(), m.val.into_iter().collect())
    } else {
        (known.clone(), BTreeSet::new())
    };

    let mut images = Vec::with_capacity(coco.images.len());
    for ci in &coco.images {
        let path = image_dir.join(&ci.file_name);
        let pixels = load_gray(&path)?;
        if pixels.dim() != (ci.height, ci.width) {
            problems.push(format!(
                "image {}: file is {}x{}, annotation says {}x{}",
                ci.id,
                pixels.ncols(),
                pixels.nrows(),
                ci.width,
                ci.height
            ));
            continue;
        }
        images.push(ImageRecord::new(ci.id, pixels, path.to_string_lossy())?);
    }

    let mut annotations = Vec::with_capacity(coco.annotations.len());
    for a in &coco.annotations {
        let mask = match Mask::from_rle(&a.segmentation) {
            Ok(m) => m,
            Err(e) => {
                problems.push(format!("annotation {}: {e}", a.id));
                continue;
            }
        };
        annotations.push(Annotation {
            annotation_id: a.id,
            image_id: a.image_id,
            class: DefectClass::from_id(a.category_id).expect("checked above"),
            bbox: BBox::from_array(a.bbox),
            mask,
        });
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    Dataset::new(images, annotations, train_ids, val_ids)
}

/// Writes `annotations.json`, `split.json` and PNG images under `images/`.
/// Returns the annotation file path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut coco = CocoFile::from_dataset(ds);
    for (img, ci) in ds.images.iter().zip(coco.images.iter_mut()) {
        ci.file_name = format!("image_{:06}.png", img.image_id);
        let path = img_dir.join(&ci.file_name);
        write_png(&img.pixels, &path)?;
    }
    let ann_path = dir.join("annotations.json");
    write_json(&ann_path, &coco)?;
    let split = SplitManifest {
        train: ds.train_ids.iter().copied().collect(),
        val: ds.val_ids.iter().copied().collect(),
    };
    write_json(&dir.join("split.json"), &split)?;
    Ok(ann_path)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_png(pixels: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = pixels.dim();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, pixels.iter().copied().collect())
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

impl ImageRecord {
    pub fn from_file(image_id: u64, path: &Path) -> Result<Self> {
        Self::new(image_id, load_gray(path)?, path.to_string_lossy())
    }
}
