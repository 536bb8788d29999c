use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("duplicate class code `{0}`")]
    DuplicateCode(String),

    #[error("class `{child}` references unknown parent `{parent}`")]
    DanglingParent { child: String, parent: String },

    #[error("top-level class `{0}` has no second-level children")]
    EmptyTopClass(String),

    #[error("unknown class code `{code}`{}", .index.map(|i| format!(" at position {i}")).unwrap_or_default())]
    UnknownCode { code: String, index: Option<usize> },

    #[error("class `{code}` has {available} records, {needed} required (short by {})", .needed - .available)]
    InsufficientRecords {
        code: String,
        needed: usize,
        available: usize,
    },

    #[error("duplicate sound id `{0}`")]
    DuplicateSoundId(String),

    #[error("unknown sound id `{0}`")]
    UnknownSound(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance has only {available} non-degenerate directions, {requested} requested")]
    DegenerateCovariance { requested: usize, available: usize },

    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,

    #[error("audio error: {0}")]
    Audio(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("requested {requested} items but only {available} available")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("models were trained on different splits")]
    SplitMismatch,

    #[error("missing fitted model: {0}")]
    MissingModel(&'static str),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<hound::Error> for Error {
    fn from(err: hound::Error) -> Self {
        match err {
            hound::Error::IoError(e) => Error::Io(e),
            other => Error::Audio(other.to_string()),
        }
    }
}
