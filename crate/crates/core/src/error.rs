use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("invalid argument for {what}: {reason}")]
    InvalidArgument { what: &'static str, reason: String },

    #[error("batch of {n} rows too small for batch-statistics normalization (need >= 2)")]
    BatchTooSmall { n: usize },

    #[error("model uses running statistics; cross-sample coupling is absent and the operation is ill-posed")]
    NoCoupling,

    #[error("pretraining did not converge: accuracy {accuracy:.4} after {epochs} epochs (target {target:.4})")]
    NoConvergence {
        accuracy: f64,
        epochs: usize,
        target: f64,
    },

    #[error("insufficient data: {reason}")]
    InsufficientData { reason: String },

    #[error("hessian is not positive definite")]
    NotPositiveDefinite,

    #[error("quantity undefined in fallback regime: {what}")]
    FallbackUndefined { what: &'static str },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("checkpoint/artifact format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what,
            reason: reason.into(),
        }
    }
}
