use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the solver, the diagnostics and the I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("rank mismatch: expected {expected}, got {got}")]
    RankMismatch { expected: &'static str, got: &'static str },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("basis validation failed: {0}")]
    Validation(String),

    #[error("step {step} out of range (driver holds {n_steps} steps)")]
    OutOfRange { step: usize, n_steps: usize },

    #[error("stability guard tripped at step {step} (t = {time:.6}): {detail}")]
    Stability { step: usize, time: f64, detail: String },

    #[error("non-finite value at step {step} (t = {time:.6})")]
    NotFinite { step: usize, time: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
