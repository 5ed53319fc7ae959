//! Command-line orchestration for the uapath pipeline: TOML run
//! configuration, one subcommand per stage, append-only run directories
//! with hashed manifests, and multi-seed reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod rundir;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
