use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed markup at byte {offset}: {reason}")]
    MalformedMarkup { offset: usize, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("lesion layout infeasible after {attempts} placement attempts")]
    LayoutInfeasible { attempts: usize },

    #[error("unknown conversation style `{0}`")]
    UnknownStyle(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("generation budget of {0} tokens exhausted before EOS")]
    GenerationBudgetExceeded(usize),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("annotator unavailable: {0}")]
    AnnotatorUnavailable(String),

    #[error("reviewer unavailable: {0}")]
    ReviewerUnavailable(String),

    #[error("corrupt state file {path}: {reason}")]
    CorruptState { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
