use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied data violates an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("step {index} of trajectory {trajectory_id}: {reason}")]
    StepParse {
        trajectory_id: String,
        index: usize,
        reason: String,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numerical degeneracy in {0}")]
    Degenerate(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("vectorizer hash mismatch: model expects {expected}, got {actual}")]
    VectorizerMismatch { expected: String, actual: String },

    #[error("artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error("split leakage: {0}")]
    Leakage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than internal failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Degenerate(_) | Error::NonFinite(_))
    }
}
