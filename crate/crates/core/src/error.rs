use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A value lies outside the domain of an operation (negative distance, non-positive depth...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration violates one of its invariants.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Cached data (basis fields, activation caches) does not match the request.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A container or text file could not be decoded.
    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
