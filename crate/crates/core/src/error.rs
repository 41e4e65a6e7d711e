use thiserror::Error;

use crate::spectral::SpectralResult;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("index {index} out of range for {len} {what}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error(
        "could not reach delta-separation {delta_target} within {attempts} attempts; \
         try a smaller delta target"
    )]
    Generation { delta_target: f64, attempts: usize },

    #[error("training diverged at step {step} (loss {loss}); the step size is too large")]
    Divergence { step: usize, loss: f64 },

    #[error(
        "kernel is numerically singular: smallest eigenvalue {lambda_min:e} <= floor {floor:e} \
         (the positive-definite kernel hypothesis is violated)"
    )]
    SingularKernel { lambda_min: f64, floor: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("power iteration did not converge after {iterations} iterations (best: {best:?})")]
    Convergence {
        iterations: usize,
        best: Box<SpectralResult>,
    },

    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        LabError::Domain(msg.into())
    }

    pub(crate) fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Schema {
            location: location.into(),
            message: message.into(),
        }
    }
}
