//! Front end of the `mimpc` tool: run configuration, run directories and the
//! `train`, `solve`, `gradcheck` and `evaluate` commands.

pub mod artifact;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
pub use mimpc_core as core;
