//! Training, evaluation, ablation and gradient-check drivers shared by the CLI and the tests.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod params;
pub mod train;

pub use ablate::{
    ablate, variants, AblationAxis, AblationReport, AblationRow, Variant, DEFAULT_SEEDS,
};
pub use config::{DataConfig, LrSchedule, OptimConfig, RunConfig};
pub use dataset::{load_splits, SplitSamples, TaskData};
pub use eval::{evaluate, EvalMetrics};
pub use gradcheck::{gradcheck, CheckResult, GradcheckReport};
pub use params::{params_report, ParamsReport};
pub use train::{train, train_on, EpochLog, LrScheduler, TrainOutcome};
