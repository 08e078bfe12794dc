use thiserror::Error;

pub type Result<T, E = MofsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MofsError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("linear solve failed for sample {sample}: {reason}")]
    Solve { sample: usize, reason: String },

    #[error("CFL violation at step {step}: courant number {courant:.3} exceeds {limit}")]
    Cfl { step: usize, courant: f64, limit: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("few-shot requires at least one demonstration")]
    NoDemonstrations,

    #[error("memory buffer is empty")]
    NoMemory,

    #[error("unknown operator: {0}")]
    UnknownOperator(String),

    #[error("missing text embedding for operator {0}")]
    MissingText(usize),

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

/// Failures when reading a dataset or checkpoint container.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("array block length {found} does not match header ({expected} bytes)")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("malformed header: {0}")]
    Header(String),
}

impl MofsError {
    /// True for failures caused by numerics (non-finite losses, solver breakdowns).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MofsError::NonFinite(_) | MofsError::Solve { .. } | MofsError::Cfl { .. }
        )
    }
}
