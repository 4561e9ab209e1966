use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Problem data rejected during validation or parsing.
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    /// A gain operator could not be inverted within the conditioning guard.
    #[error("{operator} not invertible at t = {time}: min |eigenvalue| = {min_abs_eig:e}")]
    SingularGain {
        operator: &'static str,
        time: f64,
        min_abs_eig: f64,
    },

    /// A Riccati solution or simulated state exceeded the overflow guard.
    #[error("numerical blowup in {context} at t = {time} (norm {norm:e})")]
    Blowup {
        context: &'static str,
        time: f64,
        norm: f64,
    },

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("regularity failure: {0}")]
    Irregular(String),

    #[error("cost estimate needs at least 2 replications, got {0}")]
    InsufficientReplications(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
