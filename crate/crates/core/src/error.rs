use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tensor belongs to a different graph")]
    ForeignTensor,

    #[error("tensor {0} has no gradient (requires_grad is false)")]
    NoGradient(usize),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("study: {0}")]
    Study(String),

    /// A request the study service refuses; nothing was stored.
    #[error("rejected: {0}")]
    Rejected(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-parsable category used by the CLI and the C API.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } | Error::Diverged { .. } => "numeric",
            Error::ForeignTensor | Error::NoGradient(_) | Error::NonScalarLoss(_) => "graph",
            Error::Io { .. } => "io",
            Error::Format { .. } | Error::Data(_) => "data",
            Error::InvalidArgument(_) => "usage",
            Error::Checkpoint(_) => "checkpoint",
            Error::Study(_) => "study",
            Error::Rejected(_) => "rejected",
        }
    }
}
