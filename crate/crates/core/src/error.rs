use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    /// A caller broke an operation's precondition (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch for `{field}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch { field: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
