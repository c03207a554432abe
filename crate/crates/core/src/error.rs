use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },

    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("features contain non-finite values")]
    NonFiniteFeatures,
    #[error("cluster mask selects no pixels")]
    EmptyCluster,

    #[error("channel mismatch: {expected} vs {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("every cluster row is invalid")]
    AllRowsInvalid,
    #[error("scene memory is frozen")]
    FrozenMemory,
    #[error("no key/value rows")]
    EmptyKeys,

    #[error("no valid cluster rows")]
    NoValidClusters,
    #[error("unknown offset variant `{0}`")]
    VariantUnknown(String),
    #[error("level mismatch: expected {expected} levels, got {actual}")]
    LevelMismatch { expected: usize, actual: usize },

    #[error("compact feature set is empty")]
    EmptySet,
    #[error("loss term `{0}` is not finite")]
    NonFiniteTerm(&'static str),

    #[error("image extents too small: {0}")]
    ExtentsTooSmall(String),
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad tensor file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage_label(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// Attaches a stage label to an error.
pub trait StageExt<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage: stage.into(),
            source: Box::new(e),
        })
    }
}
