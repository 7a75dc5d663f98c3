use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("sample {id}: {rule}")]
    Validation { id: String, rule: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite {what}: {diagnostics}")]
    NonFinite { what: String, diagnostics: String },

    #[error("missing encoder checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub(crate) fn validation(id: impl Into<String>, rule: impl Into<String>) -> Self {
        Error::Validation { id: id.into(), rule: rule.into() }
    }
}
