//! Optimizer, learning-rate schedules, early stopping, the training loop and
//! cross-validation.

mod cv;
mod early_stop;
mod optim;
mod schedule;
mod trainer;

pub use cv::*;
pub use early_stop::{EarlyStopState, StopDecision};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::{lr_cosine_warm_restarts, lr_one_cycle};
pub use trainer::{evaluate, train_model, train_step, EpochRecord, SampleSet, ScheduleKind, TrainConfig, TrainOutcome};
