use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants split into input problems (bad files, inconsistent parameters,
/// degenerate data) and internal ones; [`Error::is_input_error`] draws that
/// line for callers that map errors onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {location}: expected {expected}, found {found}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        location: String,
    },

    #[error("bad magic: expected \"COPROEMB\", found {0:?}")]
    BadMagic([u8; 8]),

    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("{extra} unexpected trailing bytes after payload")]
    TrailingData { extra: u64 },

    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },

    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("partition size {beta} must be smaller than the random pool ({pool})")]
    PartitionTooLarge { beta: usize, pool: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("class logit {logit:e} is too close to zero to normalize by")]
    ZeroLogit { logit: f64 },

    #[error("ground-truth vector is all zeros")]
    ZeroVector,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("class sets differ between methods: {0}")]
    ClassSetMismatch(String),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True when the error is caused by the caller's inputs rather than by
    /// the environment (I/O failures writing outputs and the like).
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Csv(_))
    }
}
