use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: numeric overflow (non-finite value produced)")]
    NonFinite { op: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backprop: {0}")]
    Backprop(String),

    #[error("gradcheck: non-finite objective when perturbing component {component}")]
    GradcheckNonFinite { component: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format: {0}")]
    Format(String),

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI's single-line error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Backprop(_) => "backprop",
            Error::GradcheckNonFinite { .. } => "gradcheck",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Truncated { .. } => "truncated",
            Error::Config { .. } => "config",
            Error::Diverged { .. } => "diverged",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
