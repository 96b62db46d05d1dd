use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum RcdError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sampling diverged at step {step} (t = {t}): {detail}")]
    Sampling { step: usize, t: usize, detail: String },

    #[error("ingestion of sample `{id}` failed ({path}): {reason}")]
    Ingestion {
        id: String,
        path: PathBuf,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = RcdError> = std::result::Result<T, E>;

pub(crate) fn validation(msg: impl Into<String>) -> RcdError {
    RcdError::Validation(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RcdError {
    let path = path.into();
    move |source| RcdError::Io { path, source }
}
