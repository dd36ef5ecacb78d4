//! Detection and segmentation metrics, sampled inference, timing and the box-count sweep.

mod ap;
mod infer;
mod iou;
mod sweep;
mod timing;

pub use ap::{compute_ap, compute_map, iou_thresholds, ApResult, PredictionRecord, Task, SCORE_THRESHOLD};
pub use infer::{run_inference, InferenceConfig, Predictor};
pub use iou::{iou_box, iou_mask};
pub use sweep::{evaluate, parse_sweep_csv, sweep_csv, sweep_random_boxes, EvalReport, SweepRow, SWEEP_CSV_HEADER};
pub use timing::{measure_inference_time, timed_inference, InferenceModel, TimingResult};
