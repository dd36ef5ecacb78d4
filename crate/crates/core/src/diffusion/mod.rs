//! Diffusion over box sets: noise schedules, forward corruption, the
//! signal-space box encoding and the deterministic reverse sampler.

mod boxes;
mod process;
mod schedule;

pub(crate) use boxes::clip_span;
pub use boxes::{decode_boxes, encode_boxes, pad_boxes, PaddedBoxes, SignalScaler};
pub use process::{
    corrupt, ddim_step, predict_noise_from_x0, predict_x0_from_noise, sampling_timesteps, single_step_diffuse, BoxState,
};
pub use schedule::{make_schedule, BetaSchedule, ScheduleConfig, ScheduleKind};
