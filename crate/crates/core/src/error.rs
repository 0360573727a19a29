use thiserror::Error;

/// Errors shared across the library.
#[derive(Error, Debug)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Vector or matrix sizes do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// The noisy Gram matrix could not be factorized.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// Cached factorization does not match the stored data.
    #[error("internal state error: {0}")]
    InternalState(String),

    /// The reference set cannot support information scoring.
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    /// A predicted trajectory left the representable range.
    #[error("rollout diverged at step {step}")]
    RolloutDivergence { step: usize },

    /// Not enough observations for the requested operation.
    #[error("not enough data: {0}")]
    NotEnoughData(String),

    /// A persisted file could not be read or written.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A persisted file or config had an unexpected shape.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    /// Too many runs of an experiment failed to finish.
    #[error("experiment failed: {0}")]
    ExperimentFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
