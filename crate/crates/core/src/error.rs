use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid MetaImage header {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("raw payload size mismatch: expected {expected} elements, file holds {actual}")]
    DataSize { expected: usize, actual: usize },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no voxel above threshold; body mask would be empty")]
    EmptyBody,

    #[error("mask contains no true voxel")]
    EmptyMask,

    #[error("loss mask selects no voxels")]
    EmptyLossMask,

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("phantom placement failed: {0}")]
    Placement(String),

    #[error("fold planning error: {0}")]
    FoldPlan(String),

    #[error("manifest error: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn header(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Header { path: path.into(), reason: reason.into() }
    }
}
