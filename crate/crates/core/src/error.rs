use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A numerical routine failed (divergence, non-convergence, non-finite values).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Input data could not be parsed or is inconsistent.
    #[error("data error at {location}: {message}")]
    Data { location: String, message: String },

    /// A serialized artifact is malformed, truncated, or fails its checksum.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Two artifacts that must agree (model vs vector set, site sets, ...) do not.
    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
