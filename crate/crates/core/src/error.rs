use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batchnorm: degenerate batch (one value per channel) in train mode")]
    DegenerateBatch,

    #[error("non-finite value in {what} at {location}")]
    NonFinite { what: String, location: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("loss is undefined: every pixel is ignored")]
    UndefinedLoss,

    #[error("non-finite gradient at step {step} (parameter {param})")]
    NonFiniteGradient { step: u64, param: String },

    #[error("missing saved forward state: {0}")]
    MissingState(&'static str),

    #[error("invalid label {value} (num_classes {num_classes})")]
    InvalidLabel { value: u8, num_classes: usize },

    #[error("metrics undefined: {0}")]
    EmptyMetrics(&'static str),

    #[error("refusing {op}: {len} tokens exceeds the limit of {limit}")]
    SizeGuard {
        op: &'static str,
        len: usize,
        limit: usize,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit status for a command failing with this error:
    /// 2 for configuration or usage, 3 for I/O, 4 for numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Dimension { .. }
            | Error::UnknownStrategy { .. }
            | Error::InvalidLabel { .. }
            | Error::SizeGuard { .. }
            | Error::Json(_) => 2,
            Error::Io { .. } | Error::Image { .. } | Error::Dataset(_) | Error::Checkpoint(_) => 3,
            Error::NonFinite { .. }
            | Error::NonFiniteGradient { .. }
            | Error::UndefinedLoss
            | Error::DegenerateBatch
            | Error::EmptyMetrics(_)
            | Error::GradCheck(_)
            | Error::MissingState(_) => 4,
        }
    }
}
