use thiserror::Error;

pub type Result<T> = std::result::Result<T, CmfgError>;

#[derive(Debug, Error)]
pub enum CmfgError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Fixed-point iteration ran out of iterations. Carries the sup-norm
    /// change per outer iteration so the caller can retry with more damping.
    #[error("no convergence in {what} after {iterations} iterations (last residual {last:.3e})")]
    Nonconvergence {
        what: String,
        iterations: usize,
        last: f64,
        residual_history: Vec<f64>,
    },

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),
}

impl CmfgError {
    pub fn domain(msg: impl Into<String>) -> Self {
        CmfgError::Domain(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CmfgError::Numeric(msg.into())
    }
}
