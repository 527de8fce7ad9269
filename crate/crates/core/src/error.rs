use thiserror::Error;

/// Errors raised by the solvers and verification routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgencyError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: String, reason: String },

    #[error("singular matrix in {context} (|det| = {det:e})")]
    SingularMatrix { context: String, det: f64 },

    #[error("agent hamiltonian is not uniquely maximised: {reason}")]
    NonConcaveHamiltonian { reason: String },

    #[error("M_beta is singular at beta_bar = {beta_bar:?} (|det| = {det:e})")]
    SingularMBeta { beta_bar: Vec<f64>, det: f64 },

    #[error("inverse of Id + Phi did not converge after {iterations} iterations (residual {residual:e}): {reason}")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        reason: String,
    },

    #[error("grid solver became unstable at step {step} (max |value| = {max_abs:e})")]
    Unstable { step: usize, max_abs: f64 },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("simulated path {path} left the admissible box at step {step}")]
    NumericOverflow { path: usize, step: usize },

    #[error("agent best response violated: policy `{policy}` beats the candidate by {gain:e} (2 SE = {two_se:e})")]
    BestResponseViolation {
        policy: String,
        gain: f64,
        two_se: f64,
    },

    #[error("Nash deviation `{deviation}` for principal {principal} gains {gain:e} (2 SE = {two_se:e})")]
    NashViolation {
        principal: usize,
        deviation: String,
        gain: f64,
        two_se: f64,
    },
}

impl AgencyError {
    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        AgencyError::InvalidParams {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AgencyError>;
