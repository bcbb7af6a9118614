//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by the simulation, reconstruction, and training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside its mathematical domain (time out of sweep,
    /// rectangle out of bounds, invalid depth, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent configuration (mismatched shapes, invalid parameter
    /// combinations, unknown config keys).
    #[error("config error: {0}")]
    Config(String),

    /// An operation was applied to data in the wrong state, e.g. compensating
    /// an already-compensated cube.
    #[error("state error: {0}")]
    State(String),

    /// Malformed or corrupt file contents.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
