use std::io;
use std::path::PathBuf;

use cubic_core::numerics::archive::ArchiveError;
use cubic_core::numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint not found at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("{0} already exists (pass --force to overwrite)")]
    Exists(PathBuf),
    #[error("frozen parameters changed: {before} -> {after}")]
    FreezeViolation { before: String, after: String },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| HarnessError::Io {
            path: path.into(),
            source,
        })
    }
}
