//! Command-line front end: configuration files and the subcommands behind
//! the `gacan` binary.

pub mod commands;
pub mod config;
mod error;

pub use error::CliError;
