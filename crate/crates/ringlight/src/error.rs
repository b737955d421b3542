//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix or tensor dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument violated a precondition (negative std, p outside (0,1), ...).
    #[error("parameter error: {0}")]
    Param(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Config file problems, with file location where available.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed serialized data (binary container, CSV, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
