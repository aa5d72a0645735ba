//! Training, cross-validation, ablations and diagnostics.

mod bench;
mod checkpoint;
mod config;
mod cv;
mod importance;
mod train;

pub use bench::{bench_constraint, loglog_slope, time_per_call, BenchReport, ScalingRow};
pub use checkpoint::{Checkpoint, ParamBlob};
pub use config::{ExperimentConfig, FoldConfig, GridConfig, NetworkOverrides, OptimizerConfig};
pub use cv::{
    ablate, aggregate, run_cv, run_cv_graphs, AblationArm, AblationCohort, AblationReport, Aggregate, RunEntry,
    RunRecord, RunTiming, Stat, Timings,
};
pub use importance::{export_embeddings, feature_importance, SHUFFLES};
pub use train::{evaluate_graphs, pooled_scores, predict, targets_with_root, train, Adam, TrainOutcome};
