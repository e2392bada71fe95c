use std::io;

use thiserror::Error;

/// Errors raised across the decoder, simulator and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition (bad shape, index, label, weight).
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Input data was rejected (non-finite values, inconsistent block).
    #[error("invalid data: {0}")]
    Data(String),
    /// A numeric computation produced a non-finite or degenerate result.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A quantity is mathematically undefined for the given input.
    #[error("undefined: {0}")]
    Undefined(String),
    /// The epoch buffer does not yet hold a full window.
    #[error("not ready: {0}")]
    NotReady(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! arg_err {
    ($($t:tt)*) => { $crate::error::Error::Argument(format!($($t)*)) };
}
pub(crate) use arg_err;
