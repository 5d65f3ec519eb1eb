use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, channel counts or configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or corrupt input data.
    #[error("data error: {0}")]
    Data(String),

    /// API misuse, e.g. calling backward twice on one graph.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values appeared during training or evaluation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
