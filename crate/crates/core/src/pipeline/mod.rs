//! End-to-end assembly: model construction, the training stages,
//! evaluation and the gradient-check suite.

mod config;
mod eval;
mod gradcheck;
mod model;
mod train;

pub use config::{LrSchedule, MaskSource, Mode, OptimizerKind, RunConfig, StageConfig};
pub use eval::{evaluate, mask_sets, RECALL_THRESHOLDS};
pub use gradcheck::{run_gradchecks, GradResult, GradTarget, GRAD_EPS, GRAD_TOLERANCE};
pub use model::{ClassifyOutput, DeopModel, PreparedMasks};
pub use train::{pretrain_encoder, run_stage, train_deop, train_proposals, StageRun, TrainLog};

#[cfg(test)]
mod tests;
