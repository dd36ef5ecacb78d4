use crate::data::Mask;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Intersection over union of two boxes; 0 when disjoint or degenerate.
pub fn iou_box(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Pixel IoU. Two empty masks have no defined overlap and yield an error.
pub fn iou_mask(a: &Mask, b: &Mask) -> Result<f64> {
    if a.size() != b.size() {
        return Err(Error::arg("masks have different dimensions"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(Error::Numerical("IoU of two empty masks is undefined".into()));
    }
    Ok(inter as f64 / union as f64)
}
