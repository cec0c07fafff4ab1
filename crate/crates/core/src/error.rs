use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HdcError>;

#[derive(Debug, Error)]
pub enum HdcError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("row {row} has norm {norm:e}, at or below the normalization floor")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("checkpoint tensor {name} has shape {found:?}, config expects {expected:?}")]
    CheckpointShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("batch contains no negative pairs (single class)")]
    NoNegatives,

    #[error("hard selection over an empty loss list")]
    EmptySet,

    #[error("batch sampling failed: {0}")]
    Sampling(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("average precision undefined for query {query}: label {label} absent from database")]
    UndefinedAp { query: usize, label: u32 },

    #[error("zero total variance; LDA score undefined")]
    DegenerateDistribution,

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainingAbort {
        iteration: usize,
        reason: String,
        batch: Vec<usize>,
    },
}

impl HdcError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        HdcError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HdcError::Io {
            path: path.into(),
            source,
        }
    }
}
