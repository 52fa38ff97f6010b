//! Command-line driver: configuration files, manifests and the `train`,
//! `sweep`, `eval`, `render-debug` and `mine-selftest` subcommands.

pub mod commands;
pub mod config;

pub use commands::run_from_args;
pub use config::RunConfig;
