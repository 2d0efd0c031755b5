use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("user {user} has {len} interactions, at least 3 are required")]
    ShortSequence { user: String, len: usize },

    #[error("user {user}: need {needed} negatives but only {available} items are eligible")]
    InsufficientItems {
        user: String,
        needed: usize,
        available: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stage `{stage}` requires {what}")]
    MissingContext { stage: &'static str, what: &'static str },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero-norm vector passed to similarity kernel")]
    ZeroNorm,

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("index {index} out of range for table with {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("transport: {0}")]
    Transport(String),

    #[error("no stored response for {entity} ({stage})")]
    Gap { entity: String, stage: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad file format: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
