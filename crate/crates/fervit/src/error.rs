//! Error taxonomy shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A partitioning or pooling layout constraint is violated
    /// (e.g. token count not divisible by window size).
    #[error("layout error in {op}: {msg}")]
    Layout { op: &'static str, msg: String },

    /// A configuration is internally inconsistent or unsupported.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric failure (NaN or non-finite value where one is not allowed).
    #[error("numeric error in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// An index (class label, tensor element) is out of range.
    #[error("index error in {op}: {msg}")]
    Index { op: &'static str, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file did not parse as the expected format (checkpoint, PGM, JSON).
    #[error("format error in {what}: {msg}")]
    Format { what: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn layout(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Layout {
            op,
            msg: msg.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            msg: msg.into(),
        }
    }

    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub fn index(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Index {
            op,
            msg: msg.into(),
        }
    }

    pub fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }
}
