use thiserror::Error;

/// Errors produced anywhere in the model, data and metric pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("row {row} has no unmasked entries")]
    DegenerateRow { row: usize },
    #[error("empty axis in {op}")]
    EmptyAxis { op: &'static str },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("degenerate label graph: {0}")]
    DegenerateGraph(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("metric unavailable: {0}")]
    MetricUnavailable(String),
    #[error("training diverged at epoch {epoch}: non-finite {term}")]
    Diverged { epoch: usize, term: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Short category name, used by the command line for exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::EmptyAxis { .. } => "shape",
            Error::DegenerateRow { .. } | Error::DegenerateGraph(_) => "degenerate",
            Error::Parameter(_) | Error::Contract(_) => "parameter",
            Error::NonFinite { .. } | Error::Diverged { .. } => "numeric",
            Error::Parse { .. } | Error::Validation(_) => "data",
            Error::MetricUnavailable(_) => "metric",
            Error::Checkpoint(_) | Error::Json(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
