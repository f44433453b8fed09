//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, empty quantile set, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Bad or unusable input data (all-missing series, empty result, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Training aborted (divergent loss, non-finite gradient).
    #[error("training error at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },

    /// Rolling evaluation aborted at a forecast origin.
    #[error("evaluation error at origin {origin}: {message}")]
    Evaluation { origin: usize, message: String },

    /// Checkpoint container is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
