//! Set-prediction training: class-balanced sampling, matching, losses and the training loop.

mod loss;
mod matching;
mod objective;
mod run;
mod sampler;

pub use loss::{compute_loss, dice_loss, focal_loss, giou, giou_with_grad, LossComponents, LossConfig, StageLoss};
pub use matching::{assign, cost_matrix, dynamic_k_match, hungarian, match_predictions, MatchResult, Matcher};
pub use objective::{image_objective, ImageObjective};
pub use run::{
    checkpoint_path, latest_checkpoint, read_metrics, train_loop, train_step, write_metrics, BestRecords, BestTable,
    StepStats, TrainConfig, TrainOutcome, TrainSetup, TrainState, Trainer, ValidationEvent, BEST_MODEL_FILE,
    METRICS_FILE, SAMPLER_LOG_FILE,
};
pub use sampler::{balanced_weights, uniform_weights, ImageSampler, SamplerWeights};
