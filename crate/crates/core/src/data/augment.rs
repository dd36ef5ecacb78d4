use ndarray::Axis;

use super::{Annotation, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Mirrors an image and its annotations about the vertical axis.
pub fn horizontal_flip(image: &ImageRecord, annotations: &[Annotation]) -> Result<(ImageRecord, Vec<Annotation>)> {
    if let Some(a) = annotations.iter().find(|a| a.image_id != image.image_id) {
        return Err(Error::arg(format!(
            "annotation {} belongs to image {}, not {}",
            a.annotation_id, a.image_id, image.image_id
        )));
    }
    let mut pixels = image.pixels.clone();
    pixels.invert_axis(Axis(1));
    let flipped = ImageRecord {
        image_id: image.image_id,
        pixels: pixels.as_standard_layout().into_owned(),
        source_path: image.source_path.clone(),
    };
    let width = image.width() as f64;
    let anns = annotations
        .iter()
        .map(|a| Annotation {
            bbox: BBox::new(width - (a.bbox.x + a.bbox.w), a.bbox.y, a.bbox.w, a.bbox.h),
            mask: a.mask.flipped_horizontally(),
            ..a.clone()
        })
        .collect();
    Ok((flipped, anns))
}
