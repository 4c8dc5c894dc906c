//! Crate-wide error type. Variants distinguish validation failures (bad
//! arguments, malformed files, mismatched shapes) from runtime failures
//! (I/O), which the CLI maps to distinct exit codes.

use std::fmt;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Invalid argument or configuration value.
    Invalid(String),
    /// Arrays/volumes/stacks whose shapes do not line up.
    DimMismatch(String),
    /// Malformed text config or manifest; carries the 1-based line number.
    Parse { line: usize, msg: String },
    /// Malformed binary file; carries the byte offset where parsing failed.
    Format { offset: u64, msg: String },
    /// Underlying I/O failure (message of the `std::io::Error`).
    Io(String),
    /// Declared but intentionally unimplemented entry point.
    NotImplemented(&'static str),
}

impl Error {
    /// Convenience constructor for `Invalid` from any displayable value.
    pub fn invalid(msg: impl fmt::Display) -> Self {
        Error::Invalid(msg.to_string())
    }

    /// True for errors caused by bad inputs rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Invalid(m) => write!(f, "invalid input: {m}"),
            Error::DimMismatch(m) => write!(f, "dimension mismatch: {m}"),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Format { offset, msg } => {
                write!(f, "malformed file at byte {offset}: {msg}")
            }
            Error::Io(m) => write!(f, "i/o error: {m}"),
            Error::NotImplemented(name) => write!(f, "{name}: not implemented"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
