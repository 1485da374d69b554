//! File I/O, run configuration and subcommands behind the `saliency` binary.

pub mod commands;
pub mod config;
pub mod netpbm;

pub use commands::{CliError, CliResult};
pub use config::RunConfig;
