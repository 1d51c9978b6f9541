//! Library side of the `offpoc` command-line tool: run configuration and the
//! `train`, `eval`, `weights` and `contract` subcommands.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::*;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: config, arguments or input files. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running. Exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}
