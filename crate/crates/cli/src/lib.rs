//! Configuration and command implementations behind the `pskv` binary.

pub mod commands;
pub mod config;

pub use commands::Outcome;
pub use config::{parse_config, parse_str, ReportFormat, RunConfig};
