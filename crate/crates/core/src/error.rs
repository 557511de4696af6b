use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("empty bag")]
    EmptyBag,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("segment start {start} + length {len} exceeds bag length {frames}")]
    SegmentOutOfRange {
        start: usize,
        len: usize,
        frames: usize,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("attention weights must sum to 1, got {0}")]
    NotSimplex(f64),

    #[error("duplicate prediction for segment {segment_id}, class {class_id}")]
    DuplicatePrediction { segment_id: String, class_id: usize },

    #[error("prediction sets cover different (segment, class) keys")]
    KeyMismatch,

    #[error("average precision is undefined without positives (N_c = 0)")]
    NoPositives,

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("non-finite gradient in `{tensor}` at step {step}")]
    NonFiniteGradient { step: usize, tensor: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
