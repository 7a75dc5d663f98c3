use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] moscard_core::Error),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing encoder checkpoint: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("config hash mismatch: {0} (use --force to override)")]
    HashMismatch(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.to_path_buf(), source }
    }

    /// Stable machine-readable kind.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Core(moscard_core::Error::NonFinite { .. }) => "divergence",
            PipelineError::Core(moscard_core::Error::MissingCheckpoint(_)) | PipelineError::MissingCheckpoint(_) => {
                "missing_checkpoint"
            }
            PipelineError::Core(moscard_core::Error::CheckpointMismatch(_)) => "checkpoint_mismatch",
            PipelineError::Core(moscard_core::Error::InvalidConfig(_)) | PipelineError::Config(_) => "invalid_config",
            PipelineError::Core(_) => "core",
            PipelineError::Io { .. } => "io",
            PipelineError::MissingInput(_) => "missing_input",
            PipelineError::HashMismatch(_) => "config_hash_mismatch",
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            error: &'a str,
            message: String,
        }
        serde_json::to_string(&Body { error: self.kind(), message: self.to_string() }).expect("error serialises")
    }
}
