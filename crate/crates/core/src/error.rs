use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OvError>;

#[derive(Debug, Error)]
pub enum OvError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("{path}: has {found} rows, expected {expected}")]
    RowMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: label {value} on line {line} is outside [0, {class_count})")]
    LabelRange {
        path: PathBuf,
        line: usize,
        value: i64,
        class_count: usize,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("infeasible split: {0}")]
    Split(String),

    #[error("pseudo-unknown generation failed: {0}")]
    Generation(String),

    #[error("fusion weights undefined: {0}")]
    Fusion(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

impl OvError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OvError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        OvError::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
