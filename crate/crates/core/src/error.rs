use thiserror::Error;

/// Errors raised by the detector library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("vector norm {norm:e} is below the degeneracy threshold")]
    DegenerateVector { norm: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("class id 0 is reserved for background")]
    ReservedClassId,

    #[error("class {0} already has a prototype")]
    ClassCollision(u32),

    #[error("duplicate class id {0}")]
    DuplicateClass(u32),

    #[error("class {0} has no prototype")]
    UnknownClass(u32),

    #[error("class {0} has no samples")]
    MissingClassSamples(u32),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}
