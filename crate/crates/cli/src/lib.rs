//! Experiment runner for the distillation laboratory: manifests, suites,
//! metrics files and reports.

pub mod error;
pub mod manifest;
pub mod report;
pub mod runner;

pub use error::{CliError, CliResult};
