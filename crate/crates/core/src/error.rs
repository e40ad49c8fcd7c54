use thiserror::Error;

/// Errors raised by the pricing library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmwbError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("grid condition violated: {0}")]
    GridCondition(String),

    #[error("non-finite coordinate passed to {0}")]
    NonFiniteCoordinate(&'static str),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(
        "kernel weights did not converge by alpha = {alpha} (negative mass {negative_mass:.3e}, \
         successive difference {difference:.3e})"
    )]
    KernelNotConverged {
        alpha: usize,
        negative_mass: f64,
        difference: f64,
    },

    #[error("transform size overflow: {0}")]
    SizeOverflow(String),

    #[error("stability bound exceeded at step {step}: |v| = {value:.6e} > bound {bound:.6e}")]
    StabilityViolation { step: usize, value: f64, bound: f64 },

    #[error("no sign change on fee bracket [{lo}, {hi}]: f(lo) = {f_lo:.6e}, f(hi) = {f_hi:.6e}")]
    NoSignChange { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("fee iteration did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("control strategy was not stored for step {0}")]
    ControlsNotStored(usize),

    #[error("singular linear system in {0}")]
    SingularSystem(&'static str),
}

pub type Result<T> = std::result::Result<T, GmwbError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> GmwbError {
    GmwbError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
