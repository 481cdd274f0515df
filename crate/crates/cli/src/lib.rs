//! Experiment runner: TOML-configured stages that synthesize data, train
//! teachers and students, run probes, and consolidate the resulting
//! reports.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, LoadedConfig, ProbeKind, StageKind};
pub use error::{CliError, Result};
pub use report::{emit_report, Report};
pub use runner::{run_experiment, RunOptions, RunSummary, StageFilter};
