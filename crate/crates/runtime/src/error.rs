use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("checkpoint {path}: format version {found}, this build reads {expected}")]
    CheckpointVersion { path: PathBuf, found: u32, expected: u32 },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f32 },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Input { path: PathBuf, msg: String },
    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error(transparent)]
    Model(#[from] hdvila_core::Error),
    #[error(transparent)]
    Subtitle(#[from] hdvila_subtitle::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for configuration problems, 3 for numeric
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFiniteLoss { .. } | Error::GradCheck(_) => 3,
            Error::Model(hdvila_core::Error::NonFinite(_)) => 3,
            _ => 1,
        }
    }
}
