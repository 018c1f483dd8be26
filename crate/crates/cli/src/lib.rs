//! Command-line front end: configuration, subcommands and exit statuses.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Overrides, RunConfig};
pub use error::CliError;
