use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("unknown tile ids: {}", .0.join(", "))]
    UnknownTiles(Vec<String>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
