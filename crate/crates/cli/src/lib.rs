//! Command-line front end: run configuration parsing and the subcommands.

mod commands;
pub mod config;

pub use commands::{exit_code, run, Cli, Command};
pub use config::{Precision, RunConfig};
