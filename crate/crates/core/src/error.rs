use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage {index} is empty: {reason}")]
    EmptyStage { index: usize, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("restore called without a prior apply_mask")]
    RestoreWithoutApply,

    #[error("non-finite loss at stage {stage}, epoch {epoch}, batch {batch} (offending tensor: {tensor})")]
    NanLoss {
        stage: usize,
        epoch: usize,
        batch: usize,
        tensor: String,
    },

    #[error("target index {target} out of range (1..={n_items})")]
    TargetOutOfRange { target: usize, n_items: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("no test cases to evaluate")]
    NoTestCases,

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

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
}
