//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by data handling, model evaluation, and training.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid or inconsistent input data (bad masks, empty series, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A requested operation exceeds the bounds of the data it was given.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// Invalid configuration; the string carries the offending field path.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure (NaN loss, bracket expansion failure, underflow).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Window exceeds the encoder's configured token capacity.
    #[error("capacity error: window has {actual} tokens, max is {max}")]
    Capacity { actual: usize, max: usize },

    /// CSV ingestion failure with the offending row number.
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    /// Checkpoint serialization/deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
