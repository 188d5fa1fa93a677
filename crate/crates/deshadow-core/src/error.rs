//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any deshadow operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// File-system level failure (missing file, permissions, ...).
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The file decoded, but not into something we accept.
    #[error("format error: {0}")]
    Format(String),

    /// Image codec failure.
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Paired inputs whose shapes must agree do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A run configuration that cannot be executed.
    #[error("configuration error: {0}")]
    Config(String),

    /// A component loss left the finite range during training.
    #[error("non-finite loss at step {step}: component {component}")]
    NonFiniteLoss { component: &'static str, step: u64 },

    /// Checkpoint or manifest (de)serialization failure.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
