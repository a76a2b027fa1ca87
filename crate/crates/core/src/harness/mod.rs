//! Class-incremental experiment driver.

mod config;
mod run;
mod stream;
mod sweep;

pub use config::{
    DataConfig, DataSourceKind, DescriptorConfig, DescriptorSourceKind, MethodConfig, OptimizerConfig,
    ProjectionConfig, ReplayConfig, RunConfig, Schedule, StreamConfig, Variant,
};
pub use run::{
    average_accuracy, evaluate, routing_similarity, run_incremental, run_with_dataset, Dataset, Evaluation,
    RunOutcome, RunReport, Scorer, TaskReport,
};
pub use stream::{make_task_stream, TaskStream};
pub use sweep::{ablation_suite, SweepCell, SweepRow, SweepSpec, SWEEP_CSV_HEADER};
