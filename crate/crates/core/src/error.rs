use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes. The CLI maps each class onto a stable exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Unreadable, unwritable or malformed files.
    Io,
    /// Checkpoints that cannot be combined elementwise.
    Schema,
    /// Non-finite values, overflow on narrowing, failed decompositions.
    Numerical,
    /// Parameters outside their domain, infeasible requests.
    InvalidInput,
    /// Evaluation records required by a report are absent.
    MissingResults,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("tensor `{name}` has unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensor `{0}` is declared more than once")]
    DuplicateTensor(String),

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("tensor `{name}` contains a non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("tensor `{name}`: value {value} overflows {dtype}")]
    Overflow {
        name: String,
        dtype: &'static str,
        value: f32,
    },

    #[error("tensor name sets differ: {}", .0.join(", "))]
    NameSetMismatch(Vec<String>),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("svd of a {rows}x{cols} matrix did not converge")]
    SvdNonConvergence { rows: usize, cols: usize },

    #[error("tensor `{name}`: interpolation denominator {denominator:e} is degenerate")]
    DegenerateInterpolation { name: String, denominator: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing evaluation results for: {}", .0.join(", "))]
    MissingResults(Vec<String>),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::MalformedHeader { .. }
            | Error::Parse { .. }
            | Error::UnsupportedDtype { .. }
            | Error::DuplicateTensor(_) => ErrorKind::Io,
            Error::UnknownTensor(_) | Error::NameSetMismatch(_) | Error::ShapeMismatch { .. } => {
                ErrorKind::Schema
            }
            Error::NonFinite { .. }
            | Error::Overflow { .. }
            | Error::SvdNonConvergence { .. }
            | Error::DegenerateInterpolation { .. } => ErrorKind::Numerical,
            Error::InvalidArgument(_) => ErrorKind::InvalidInput,
            Error::MissingResults(_) => ErrorKind::MissingResults,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
