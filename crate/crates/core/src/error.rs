use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a shape or argument contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An IDX or checkpoint file did not have the expected layout.
    #[error("format error in {path}: {field}: {detail}")]
    Format {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },

    /// Training produced a non-finite objective.
    #[error("training diverged at task {task}, epoch {epoch}: loss={loss} (lambda={lambda}, lr={lr})")]
    Divergence {
        task: usize,
        epoch: usize,
        loss: f64,
        lambda: f64,
        lr: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
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
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
