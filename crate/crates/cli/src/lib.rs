//! Command-line front end: config parsing, solve and simulate runs, and the
//! files they leave behind.

pub mod artifacts;
pub mod config;
pub mod report;
pub mod run;

use std::path::PathBuf;

pub use config::{emit_config, parse_config, ConfigError, RunConfig};
pub use report::{emit_report, RunReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Input(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("solve failed: {0}")]
    Solve(icsteer::Error),

    #[error("simulation failed: {0}")]
    Simulate(icsteer::Error),
}

impl CliError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Solve(_) => 3,
            CliError::Simulate(_) => 4,
        }
    }
}
