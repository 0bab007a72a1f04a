//! Training loop, model selection, ablation grids and reporting.

pub mod ablate;
pub mod config;
pub mod manifest;
pub mod report;
pub mod train;

pub use config::{ModelSize, TrainConfig};
pub use train::{run_training, train_step, LossBreakdown, RunRecord, StepSettings, TrainOutcome};
