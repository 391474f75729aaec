use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments. Exit code 2.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] tpamtl::Error),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// Some cells failed; the rest completed. Exit code 1.
    #[error("{failed} of {total} cells failed:\n{details}")]
    Cells {
        failed: usize,
        total: usize,
        details: String,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(tpamtl::Error::Config(_) | tpamtl::Error::Spec(_)) => 2,
            _ => 1,
        }
    }
}
