//! Experiment runner for the `eqsim` library: config files, data generation,
//! training, evaluation reports, equivariance histograms and benchmark
//! manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod jsonl;
pub mod pipeline;

pub use error::{CliError, CliResult};
