use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for {len} rows")]
    Index { op: &'static str, index: usize, len: usize },

    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("level count mismatch: expected {expected}, got {actual}")]
    LevelMismatch { expected: usize, actual: usize },

    #[error("degenerate occlusion mask at level {level}: mask sum {sum:e} below guard")]
    DegenerateMask { level: usize, sum: f64 },

    #[error("no non-occluded points; EPE is undefined")]
    UndefinedEpe,

    #[error("poisoned gradient for parameter `{0}` (NaN or infinite)")]
    PoisonedGradient(String),

    #[error("non-finite parameter `{name}` after step {step}")]
    NonFiniteParameter { name: String, step: u64 },

    #[error("sample is missing ground truth flow")]
    MissingGroundTruth,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("inconsistent file contents: {0}")]
    Inconsistent(String),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
