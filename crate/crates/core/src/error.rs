use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("row has {got} cells but schema has {expected} columns")]
    SchemaMismatch { expected: usize, got: usize },

    #[error("header mismatch: expected {expected:?}, found {found:?}")]
    HeaderMismatch { expected: Vec<String>, found: Vec<String> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("context of {len} tokens exceeds the model context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("non-finite loss encountered: {0}")]
    NonFiniteLoss(String),

    #[error("rollout is stale: collected at policy version {collected}, policy is at {current}")]
    StaleRollout { collected: u64, current: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("degenerate target column {0:?}: need at least two classes")]
    DegenerateTarget(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("feature {0:?} is not numeric")]
    NotNumeric(String),

    #[error("empty table: {0}")]
    EmptyTable(String),

    #[error("EM failed to converge to a finite likelihood: {0}")]
    EmFailure(String),

    #[error("generation budget exhausted after {attempts} attempts with {collected} of {target} rows")]
    BudgetExhausted {
        attempts: usize,
        collected: usize,
        target: usize,
    },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("backend returned an empty completion")]
    EmptyCompletion,

    #[error("unknown dataset kind {0:?}; register a prompt template for it")]
    UnknownDatasetKind(String),

    #[error("retrieval corpus is empty")]
    EmptyCorpus,

    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input or configuration rather
    /// than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidSchema(_)
                | Error::Config(_)
                | Error::Domain(_)
                | Error::HeaderMismatch { .. }
                | Error::UnknownDatasetKind(_)
                | Error::UnknownFeature(_)
        )
    }
}
