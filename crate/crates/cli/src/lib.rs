//! Command-line workflow: pretraining, synthetic sites, the two benchmarks,
//! imputation of site tables and report rendering.

pub mod commands;
pub mod config;
pub mod drivers;
pub mod error;
pub mod manifest;

pub use commands::{run, Cli};
pub use error::CliError;
