use thiserror::Error;

/// Errors produced by the physical-layer library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid or unsupported static configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// No frame could be found in the signal.
    #[error("no preamble found")]
    NotFound,
    /// Offset or channel estimation could not separate the users.
    #[error("estimation degenerate: {0}")]
    Degenerate(String),
    /// Nothing to aggregate.
    #[error("no data")]
    NoData,
    /// Malformed trace or metadata.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
