use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (factorisation failed)")]
    NotPositiveDefinite,

    #[error("invalid cavity: precision matrix is not positive definite")]
    InvalidCavity,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("mixture has no components")]
    EmptyMixture,

    #[error("all Poisson rates are zero")]
    ZeroRates,

    #[error("communication graph is disconnected")]
    Disconnected,

    #[error("global approximation is not positive definite for target {target}")]
    GlobalNotPositiveDefinite { target: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {path}: {message}")]
    Config { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Numerical failures that abort a single Monte Carlo run rather than the experiment.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite
                | Error::InvalidCavity
                | Error::GlobalNotPositiveDefinite { .. }
        )
    }
}
