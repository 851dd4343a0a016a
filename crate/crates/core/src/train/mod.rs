//! Training protocol: optimiser, learning-rate schedule, early stopping,
//! data splits and multi-run aggregation.

pub mod config;
pub mod early_stop;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod run;
pub mod split;

pub use config::{NegativeMode, TrainConfig};
pub use early_stop::EarlyStopper;
pub use metrics::{compute_metrics, ConfusionMatrix, Metrics};
pub use optim::{step_lr, Adam, AdamConfig};
pub use report::{MeanStd, MetricSummary, Report, RunRecord, RunStatus, SplitResult};
pub use run::{evaluate, multi_run, train_run, Evaluation, MultiRun, RunData, RunOutcome};
pub use split::stratified_split;
