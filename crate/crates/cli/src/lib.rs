//! Batch front end: configuration, dataset files, training, evaluation,
//! ablation tables and attention exports.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
