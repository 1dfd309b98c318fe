use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("unsupported op: {0}")]
    UnsupportedOp(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("inconsistent dimensions: {0}")]
    InconsistentDimensions(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("matrix is not row-stochastic: {0}")]
    NotStochastic(String),

    #[error("attention was not retained in the forward trace")]
    AttentionNotRetained,

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::UnsupportedOp(_) => "unsupported_op",
            Error::Backward(_) => "backward",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
            Error::InconsistentDimensions(_) => "inconsistent_dimensions",
            Error::Empty(_) => "empty",
            Error::Config(_) => "config",
            Error::OutOfRange(_) => "out_of_range",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::NotStochastic(_) => "not_stochastic",
            Error::AttentionNotRetained => "attention_not_retained",
            Error::MissingTensor(_) => "missing_tensor",
            Error::Divergence { .. } => "divergence",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
