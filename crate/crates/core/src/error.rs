use thiserror::Error;

/// Failures raised by the numerical modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ellipticity violated at y={y:?}, s={s}: Rayleigh quotient {quotient} outside [{lower}, {upper}]")]
    EllipticityViolation {
        y: Vec<f64>,
        s: f64,
        quotient: f64,
        lower: f64,
        upper: f64,
    },
    #[error("step {step} does not tile the interval [{lower}, {upper}]")]
    NonIntegerDivision { lower: f64, upper: f64, step: f64 },
    #[error("linear solve stalled after {iterations} iterations (relative residual {residual:e})")]
    SolverDivergence { iterations: usize, residual: f64 },
    #[error("oscillation unresolved: {0}")]
    UnresolvedOscillation(String),
    #[error("burn-in not converged: relative L2 change {change:e} exceeds {tolerance:e}")]
    BurnInNotConverged { change: f64, tolerance: f64 },
    #[error("averaging window holds only {nodes} nodes along an axis (need at least 8)")]
    WindowTooSmall { nodes: usize },
    #[error("flux potential datum has window mean {mean:e} (limit {limit:e})")]
    MeanNotZero { mean: f64, limit: f64 },
    #[error("mollifier kernel unresolved: {0}")]
    KernelUnresolved(String),
    #[error("collar width delta={delta} must exceed eps={eps}")]
    CollarTooThin { delta: f64, eps: f64 },
    #[error("pole at distance {distance} from the boundary (need at least {required})")]
    PoleTooCloseToBoundary { distance: f64, required: f64 },
    #[error("corrector scale S={s} does not match 1/eps={expected}")]
    ScaleMismatch { s: f64, expected: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
