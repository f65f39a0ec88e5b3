use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value in {what} at step {step}")]
    Divergence { what: String, step: usize },

    #[error("episode over: t={t} >= horizon {horizon}")]
    EpisodeOver { t: usize, horizon: usize },

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("{0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
