//! Synthetic data, the training loop with hot-swap scheduling, metric
//! logging, checkpoints and run comparison.

mod checkpoint;
mod compare;
mod config;
mod data;
mod log;
mod schedule;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use compare::{
    accuracy, compare, compare_metrics, default_activation_threshold, eval_accuracy, steps_to_activation,
    CompareReport, LayerComparison, SeriesDelta, REPORT_EVAL_SEED, REPORT_EVAL_TOKENS,
};
pub use config::RunConfig;
pub use data::{SyntheticTask, SyntheticTaskSpec};
pub use log::{export_csv, read_metrics, MetricsLogWriter, METRICS_FILE};
pub use schedule::{HotSwapSchedule, ScheduleEntry};
pub use train::{
    step_checkpoint_name, train, train_with, RunSummary, StepReport, TrainOptions, Trainer, CONFIG_FILE,
    FINAL_CHECKPOINT,
};
