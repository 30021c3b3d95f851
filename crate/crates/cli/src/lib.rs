//! Command-line driver: loads an experiment file, runs one of the
//! subcommands and writes CSV/JSON results.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{cmd_audit, cmd_diversity, cmd_primitives, cmd_run, Options};
pub use config::{ConfigFile, Loaded};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<ixplore_core::Error> for CliError {
    fn from(e: ixplore_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
