use alloc::string::String;

/// Errors raised by the reconstruction toolkit.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("object evaluated to a non-finite value at pixel {pixel}, frame {frame}")]
    NonFinite { pixel: usize, frame: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(&'static str),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("index {index} out of range 0..{len}")]
    OutOfRange { index: usize, len: usize },
    #[error("time {t} s outside [0, {horizon}] s")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("network weights are not finite")]
    NonFiniteWeights,
    #[error("conjugate gradient broke down at iteration {iteration}")]
    CgBreakdown { iteration: usize },
    #[error("non-finite loss at optimizer step {step}")]
    NonFiniteLoss { step: usize },
    #[error("objective {objective:e} at iteration {iteration} exceeds {factor}x the initial {initial:e}")]
    Diverged {
        iteration: usize,
        objective: f64,
        initial: f64,
        factor: f64,
    },
    #[error("singular value decomposition did not converge")]
    Svd,
    #[error("reference has zero norm on the evaluated region")]
    ZeroNorm,
    #[error("region of interest is empty")]
    EmptyRoi,
    #[error("frame side {side} is smaller than the {window}-pixel window")]
    FrameTooSmall { side: usize, window: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
