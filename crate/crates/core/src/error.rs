use thiserror::Error;

/// Errors produced by the simulation and optimization routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t} outside pulse grid [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("incompatible pulses: {0}")]
    IncompatiblePulses(String),

    /// The functional grew during a Krotov sweep; the step size 1/λ_a was too large.
    #[error(
        "functional increased from {before:.6e} to {after:.6e} during the sweep \
         (λ_a = {lambda_a:.3e} is too small; increase it)"
    )]
    NonMonotonic {
        before: f64,
        after: f64,
        lambda_a: f64,
    },

    #[error("contrast undefined: p_max + p_min = 0")]
    UndefinedContrast,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
