use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown task id {task} (model has {num_tasks} tasks)")]
    UnknownTask { task: usize, num_tasks: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("infeasible dataset spec: {0}")]
    Spec(String),

    #[error("{path}: row {row}: {message}")]
    Ingest { path: PathBuf, row: usize, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },

    #[error("task-loss tracker has no record for task {0}")]
    EmptyTracker(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing result cells: {0}")]
    MissingCells(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
