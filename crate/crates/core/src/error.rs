use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    /// A forward op produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("state error: {0}")]
    State(String),

    /// A metric has no defined value for the given inputs (e.g. AUC with one class).
    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Checkpoint tensors do not match the configured model.
    #[error("checkpoint mismatch:\n  {}", .0.join("\n  "))]
    Mismatch(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
