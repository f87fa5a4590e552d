//! Experiment pipelines and report emission for the `permweld` tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use commands::{run, Cli};
pub use config::{ExperimentConfig, Loaded};
pub use error::{CliError, CliResult};
