use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{primitive}`")]
    Numeric { primitive: &'static str },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("schema violation at `{pointer}`: {message}")]
    Schema { pointer: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("training aborted on example `{example}`: {reason}")]
    TrainingAborted { example: String, reason: String },

    #[error("checkpoint `{path}`: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("missing artifact `{path}`; run `{command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
