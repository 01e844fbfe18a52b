//! Orchestration for the `tod` binary: run configuration, checkpoint layout
//! and the subcommands.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use config::{Overrides, RunConfig};
pub use error::CliError;
