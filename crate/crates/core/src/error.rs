use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid config: `{field}` {reason}")]
    InvalidField { field: String, reason: String },

    #[error("inconsistent config: `{first}` and `{second}`: {reason}")]
    Conflict {
        first: String,
        second: String,
        reason: String,
    },

    #[error("ingestion error at {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("split error: class {class_id} has {count} clip(s), need at least 2")]
    Split { class_id: usize, count: usize },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("model state error: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss at step {step} (batch index {batch_index}): {detail}")]
    NonFiniteLoss {
        step: u64,
        batch_index: usize,
        detail: String,
    },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn field(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
