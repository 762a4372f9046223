use thiserror::Error;

pub type Result<T> = std::result::Result<T, MnoError>;

#[derive(Debug, Error)]
pub enum MnoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: u64, what: String },

    #[error("solver failed to converge after {iterations} iterations (relative residual {residual:e})")]
    SolverFailure { iterations: usize, residual: f64 },

    #[error("numerical instability: {0}")]
    Instability(String),

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MnoError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MnoError::InvalidArgument(msg.into())
    }
}
