use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error at byte {pos}: {msg}")]
    Format { pos: u64, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid statistics: {0}")]
    Stats(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("rewrite error: {0}")]
    Rewrite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error at column {column}: {msg}")]
    Numeric { column: usize, msg: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(pos: u64, msg: impl Into<String>) -> Self {
        Error::Format { pos, msg: msg.into() }
    }
}
