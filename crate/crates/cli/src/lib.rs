//! Library side of the `nqm` command line tool: configuration, experiment
//! drivers and the subcommands themselves.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod output;

use std::path::{Path, PathBuf};

use nqm::NqmError;
use thiserror::Error;

pub use commands::{run, Command};
pub use config::{Overrides, Preset, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] NqmError),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("oracle check failed: {0}")]
    Oracle(String),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for bad input, 2 for numerical failure, 3 for a failed oracle.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(NqmError::Instability { .. } | NqmError::Degenerate(_)) => 2,
            CliError::Oracle(_) => 3,
            _ => 1,
        }
    }
}
