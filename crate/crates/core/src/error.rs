use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// An eigenvalue of the Hessian reached or crossed `2 / eta`.
    #[error("edge of stability: eigenvalue {eigenvalue} vs limit 2/eta = {limit}")]
    EdgeOfStability { eigenvalue: f64, limit: f64 },

    #[error("stability precondition violated: {0}")]
    Stability(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing capability: {0}")]
    Capability(String),

    #[error("run diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
}

impl Error {
    /// True for configuration-type failures (as opposed to numerical ones).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Capability(_) | Error::InvalidInput(_) | Error::DimensionMismatch { .. }
        )
    }
}
