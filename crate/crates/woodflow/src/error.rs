//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. The variants are
//! coarse on purpose: callers mostly need to distinguish "you called this
//! wrong" from "the data is bad" from "the math broke down", which is also how
//! the CLI maps errors onto exit codes.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not line up (matmul dims, elementwise mismatch, ...).
    Shape(String),
    /// A matrix that must be invertible is singular. `context` names the
    /// layer or operation that needed the inverse.
    Singular { context: String },
    /// An API precondition was violated (uninitialized actnorm, non-scalar
    /// loss node, negative temperature, ...).
    Contract(String),
    /// Invalid model or run configuration.
    Config(String),
    /// Malformed data file or dataset contents.
    Data(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A non-finite value appeared where finite math is required. The message
    /// names the layer or parameter involved.
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Singular { context } => write!(f, "singular matrix in {context}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
