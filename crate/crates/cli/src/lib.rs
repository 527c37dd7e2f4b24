//! Configuration and subcommands of the `fedrec` binary.

pub mod commands;
pub mod config;

pub use config::{parse_config, ConfigError, ExperimentConfig};
