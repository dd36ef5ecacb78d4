//! Minimal CPU network primitives with explicit backward passes.
//!
//! Parameters live in one flat buffer ([`ParamStore`]) so the optimizer,
//! checkpointing and finite-difference checks all see a single vector.
//! Every layer's `forward` returns whatever its `backward` needs.

mod container;
mod layers;
mod ops;
mod optim;
mod params;

pub use container::{read_container, write_container};
pub use layers::{Conv2d, ConvCache, Linear};
pub use ops::{
    nearest_upsample2, nearest_upsample2_backward, relu_backward, relu_inplace, resample_matrix, roi_align,
    roi_align_backward, timestep_embedding, Resampler, RoiAlignCache,
};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Grads, ParamId, ParamStore};
