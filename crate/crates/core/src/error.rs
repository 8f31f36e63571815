use std::path::PathBuf;

use crate::corpus::SchemaViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    /// A NaN or infinity appeared in an op output.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate variance: layer norm over {dim} element(s) with eps = 0")]
    DegenerateVariance { dim: usize },

    #[error("finite-difference step {eps:e} underflows (allowed range is [1e-7, 1e-3])")]
    StepUnderflow { eps: f64 },

    #[error("finite-difference step {eps:e} is too coarse (allowed range is [1e-7, 1e-3])")]
    StepTooLarge { eps: f64 },

    #[error("objective is not reproducible: two evaluations gave {first} and {second}")]
    Reproducibility { first: f64, second: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("line {line}: {field}: {kind}: {message}")]
    Schema {
        line: usize,
        field: String,
        kind: SchemaViolation,
        message: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("non-finite loss at step {step} (records: {records})")]
    NonFiniteLoss { step: usize, records: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad user input (files, flags, configs)
    /// rather than by a failure while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Schema { .. }
                | Error::Dataset(_)
                | Error::Vocab(_)
                | Error::Checkpoint(_)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::StepUnderflow { .. }
                | Error::StepTooLarge { .. }
        )
    }
}
