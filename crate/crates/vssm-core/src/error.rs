//! Crate error type.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by model, tape and codec operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Caller violated an operation's contract (shape mismatch, bad range...).
    Usage(String),
    /// A numeric fault: non-finite values where finite ones are required.
    Numeric(String),
    /// A serialized artifact failed to parse or verify.
    Format(String),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
