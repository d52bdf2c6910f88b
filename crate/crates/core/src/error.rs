use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the control lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("insufficient temperature history: need {needed} steps, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("rank-deficient regressor for zone {zone}: degenerate columns {columns:?}")]
    RankDeficient { zone: usize, columns: Vec<String> },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("exogenous data too short: need {needed} records, have {available}")]
    DataTooShort { needed: usize, available: usize },

    #[error("episode already finished after {steps} steps")]
    EpisodeDone { steps: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("worker failure at iteration {iteration}, member {member}: {message}")]
    Worker {
        iteration: usize,
        member: usize,
        message: String,
    },

    #[error("training diverged at iteration {iteration}: cost {cost:.4} exceeds 3x start {start:.4}")]
    Diverged {
        iteration: usize,
        cost: f64,
        start: f64,
    },

    #[error("solver: {0}")]
    Solver(String),

    #[error("missing prerequisite file {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed CSV {}: line {line}: {message}", path.display())]
    MalformedCsv {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("controller `{name}`: {source}")]
    Controller {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("plotting: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Controller { source, .. } => source.is_usage(),
            other => matches!(
                other,
                Error::InvalidConfig(_) | Error::MissingArtifact(_) | Error::Json(_)
            ),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
