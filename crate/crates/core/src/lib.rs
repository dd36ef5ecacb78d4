//! Diffusion-based defect detection and dynamic-kernel instance segmentation.
//!
//! Boxes are treated as a signal that is corrupted with Gaussian noise during
//! training and recovered by a learned denoiser at inference time. Each
//! detection carries a small vector of 1×1 convolution weights that, applied to
//! a fused feature map, produces its mask.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{BBox, ImageSize};
pub use scalar::Scalar;

pub type BetaSchedule32 = diffusion::BetaSchedule<f32>;
pub type BetaSchedule64 = diffusion::BetaSchedule<f64>;
pub type BoxState32 = diffusion::BoxState<f32>;
pub type BoxState64 = diffusion::BoxState<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
