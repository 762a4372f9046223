use std::path::Path;

use mno_core::MnoError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// Wrap an error that concerns a specific file.
    pub fn at(path: &Path, err: impl Into<CliError>) -> Self {
        match err.into() {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

impl From<MnoError> for CliError {
    fn from(e: MnoError) -> Self {
        let msg = e.to_string();
        match e {
            MnoError::SolverFailure { .. } | MnoError::Instability(_) | MnoError::Positivity(_) => CliError::Solver(msg),
            MnoError::Divergence { .. } => CliError::Divergence(msg),
            MnoError::InvalidArgument(_)
            | MnoError::UndefinedMetric(_)
            | MnoError::Format { .. }
            | MnoError::Io(_)
            | MnoError::Json(_) => CliError::Config(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
