use std::io;
use std::path::PathBuf;

use rpg_core::RpgError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config file or flag value. Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// A check ran and failed (gradient tolerance, audit, estimator). Exit code 1.
    #[error("assertion failed: {0}")]
    Assertion(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Assertion(_) => 1,
            Self::Config(_) => 2,
            Self::Io { .. } | Self::Runtime(_) => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

impl From<RpgError> for CliError {
    fn from(e: RpgError) -> Self {
        match e {
            RpgError::InvalidConfig(msg) => Self::Config(msg),
            other => Self::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
