use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed rough-path file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] roughmfg_core::Error),
    #[error("serialisation failed: {0}")]
    Serialise(String),
    #[error("fixed point did not converge after {iterations} iterations (last update {last_update:.3e})")]
    NotConverged { iterations: usize, last_update: f64 },
}

impl RunError {
    /// Process exit status: 2 validation, 3 runtime, 4 strict non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) | RunError::Parse { .. } => 2,
            RunError::NotConverged { .. } => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Serialise(e.to_string())
    }
}

impl From<serde_json::Error> for RunError {
    fn from(e: serde_json::Error) -> Self {
        RunError::Serialise(e.to_string())
    }
}

pub type RunResult<T> = Result<T, RunError>;
