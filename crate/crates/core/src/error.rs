use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("unknown tape variable {0}")]
    UnknownVar(usize),

    #[error("index {index} out of range for {what} of size {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown vocabulary token {0:?}")]
    UnknownToken(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("taxonomies do not share a root")]
    DisjointTaxonomies,

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("calibration failed for level {level}: {detail}")]
    Calibration { level: String, detail: String },

    #[error("unknown method {0:?}")]
    UnknownMethod(String),

    #[error("missing dataset {0:?}")]
    MissingDataset(String),

    #[error("isolation violated: {0}")]
    Isolation(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
