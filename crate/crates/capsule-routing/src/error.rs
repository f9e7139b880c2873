//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, routing, data loading and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An operation received tensors whose shapes do not conform.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A value lies outside the mathematical domain of an operation.
    Domain { op: &'static str, detail: String },
    /// A caller-supplied argument is invalid.
    InvalidArgument { what: String },
    /// A routing procedure violated the engine contract.
    ContractViolation { detail: String },
    /// A function expected to be deterministic produced differing outputs.
    NonDeterministic { detail: String },
    /// A binary file failed to parse.
    Parse {
        path: String,
        offset: u64,
        detail: String,
    },
    /// Configuration file or override problem.
    Config { detail: String },
    /// Checkpoint manifest or blob problem.
    Checkpoint { detail: String },
    /// Training aborted (e.g. repeated non-finite losses).
    Training { detail: String },
    /// Underlying I/O failure.
    Io { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")
            }
            Error::Domain { op, detail } => write!(f, "{op}: domain error: {detail}"),
            Error::InvalidArgument { what } => write!(f, "invalid argument: {what}"),
            Error::ContractViolation { detail } => write!(f, "contract violation: {detail}"),
            Error::NonDeterministic { detail } => write!(f, "non-deterministic: {detail}"),
            Error::Parse {
                path,
                offset,
                detail,
            } => write!(f, "parse error in {path} at byte {offset}: {detail}"),
            Error::Config { detail } => write!(f, "config error: {detail}"),
            Error::Checkpoint { detail } => write!(f, "checkpoint error: {detail}"),
            Error::Training { detail } => write!(f, "training aborted: {detail}"),
            Error::Io { detail } => write!(f, "io error: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io {
            detail: e.to_string(),
        }
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
