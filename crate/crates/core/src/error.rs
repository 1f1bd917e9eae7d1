use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CuratorError>;

#[derive(Debug, Error)]
pub enum CuratorError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("image id mismatch ({context}): missing {missing:?}, extra {extra:?}")]
    ImageIdMismatch {
        context: String,
        missing: Vec<u64>,
        extra: Vec<u64>,
    },

    #[error("duplicate roi_id {roi_id} in image {image_id}")]
    DuplicateRoi { image_id: u64, roi_id: u64 },

    #[error("no labeled pairs available for similarity training")]
    NoPairs,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("pipeline state: {0}")]
    State(String),

    #[error("manifest is locked by another process ({0}); remove the lock file if no other run is active")]
    Locked(PathBuf),
}

impl CuratorError {
    /// Stable, machine-parseable category for the CLI's stderr line.
    pub fn category(&self) -> &'static str {
        match self {
            CuratorError::InvalidInput(_) => "invalid-input",
            CuratorError::DimensionMismatch { .. } => "dimension-mismatch",
            CuratorError::ImageIdMismatch { .. } => "image-id-mismatch",
            CuratorError::DuplicateRoi { .. } => "duplicate-roi",
            CuratorError::NoPairs => "no-pairs",
            CuratorError::Parse { .. } => "parse",
            CuratorError::Io { .. } => "io",
            CuratorError::State(_) => "state",
            CuratorError::Locked(_) => "locked",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CuratorError::InvalidInput(_) => 2,
            CuratorError::Parse { .. } => 3,
            CuratorError::Io { .. } => 4,
            CuratorError::State(_) | CuratorError::Locked(_) => 5,
            _ => 6,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CuratorError::Io {
            path: path.into(),
            source,
        }
    }
}
