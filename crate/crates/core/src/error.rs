use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sample stream exhausted after {got} of {needed} samples")]
    StreamExhausted { needed: usize, got: usize },

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { iteration: usize, what: &'static str },

    #[error("invalid probability table: {0}")]
    InvalidPmf(String),

    #[error("conditioning cell {0} has no observations")]
    EmptyCell(usize),

    #[error("regularization level must be positive, got {0}")]
    InvalidAlpha(f64),

    #[error("singular value {index} is zero")]
    ZeroSingularValue { index: usize },

    #[error("estimator has no snapshots")]
    EmptySnapshots,

    #[error("singular moment matrix")]
    SingularMatrix,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, got })
        }
    }
}
