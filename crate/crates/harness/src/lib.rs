//! Reproducible experiments for `vilo-core`: scenario sweeps, mode comparisons, solver
//! benchmarks and the acceptance suite behind the `vilo` command-line tool.

pub mod acceptance;
pub mod bench;
pub mod compare;
pub mod config;
pub mod pipeline;
pub mod report;

pub use compare::{compare_modes, ComparisonTable};
pub use config::{ExperimentConfig, Mode, RunSpec};
pub use pipeline::{run_pipeline, run_single, PipelineSettings, RunReport};
pub use report::{run_experiment, ExperimentReport};
