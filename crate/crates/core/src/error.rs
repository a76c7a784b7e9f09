use std::path::PathBuf;

/// Errors produced anywhere in the ranking / training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid score group: {0}")]
    InvalidGroup(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("probability out of range: {0}")]
    ProbabilityOutOfRange(f64),

    #[error("response index {index} out of range for group of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("batch too small: need at least 2 images, got {0}")]
    BatchTooSmall(usize),

    #[error("missing preference for pair ({0}, {1})")]
    MissingPreference(usize, usize),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("response parse error: {0}")]
    Response(String),

    #[error("score {0} outside [1, 5]")]
    ScoreOutOfRange(f64),

    #[error("image {image_id} has {got} valid responses, need {need}")]
    UnderfilledGroup {
        image_id: String,
        got: usize,
        need: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric/runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. }
            | Error::Response(_)
            | Error::ScoreOutOfRange(_)
            | Error::UnderfilledGroup { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::MissingPreference(..)
            | Error::DimensionMismatch { .. }
            | Error::ShapeMismatch(_) => 3,
            _ => 4,
        }
    }
}
