//! Experiment runner around `fairkd-core`: TOML configuration, versioned
//! checkpoints, text file formats and Table-1-style reports.
//!
//! The `fairkd` binary exposes the pipeline as subcommands; see [`cli`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod formats;
pub mod report;
pub mod runner;

pub use config::ExperimentConfig;
pub use runner::{run_experiment, RunSummary, StageError, Until};
