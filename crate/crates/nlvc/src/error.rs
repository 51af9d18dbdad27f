//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// API misuse (e.g. backward from a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),
    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Bitstream or coder integrity failure.
    #[error("codec error: {0}")]
    Codec(String),
    /// Metric is undefined for the given inputs.
    #[error("metric error: {0}")]
    Metric(String),
    /// Bad input data (sequence too short, malformed file contents, ...).
    #[error("input error: {0}")]
    Input(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn codec(msg: impl Into<String>) -> Self {
        Error::Codec(msg.into())
    }
    pub fn metric(msg: impl Into<String>) -> Self {
        Error::Metric(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
