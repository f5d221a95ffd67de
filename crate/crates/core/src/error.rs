use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("no valid stability angle: {0}")]
    NoValidTau(String),

    #[error("positive region of f''' could not be resolved: {0}")]
    RegionStructureUnknown(String),

    #[error("adaptive quadrature did not converge after {0} subdivisions")]
    QuadratureNonconvergence(usize),

    #[error("invalid asymmetric weights a={a}, b={b}: need ab >= 0 and not both zero")]
    InvalidWeights { a: f64, b: f64 },

    #[error("no sign change over bracket [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },

    #[error("root not bracketed: {0}")]
    RootNotBracketed(String),

    #[error("kernel does not support this operation: {0}")]
    UnsupportedKernel(String),

    #[error("state is not stationary: residual {residual:e} >= tolerance {tolerance:e}")]
    NotStationary { residual: f64, tolerance: f64 },

    #[error("adaptive step size underflow at t={t} (dt={dt:e})")]
    StepSizeUnderflow { t: f64, dt: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl SyncError {
    /// Whether the error stems from the numerics rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, SyncError::InvalidWeights { .. } | SyncError::UnsupportedKernel(_) | SyncError::InvalidInput(_))
    }
}

pub type Result<T> = std::result::Result<T, SyncError>;
