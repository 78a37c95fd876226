use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("trajectory diverged (non-finite state) at integrator step {step}")]
    Divergence { step: u64 },

    #[error("non-finite tangent stretch at integrator step {step}")]
    NonFiniteStretch { step: u64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "calibration rejected for F={forcing}: residual mean {residual_mean:.4e}, \
         residual variance {residual_var:.4e} ({reason})"
    )]
    CalibrationRejected {
        forcing: f64,
        residual_mean: f64,
        residual_var: f64,
        reason: String,
    },

    #[error("map history does not cover steps {from}..{to}")]
    HistoryUnderflow { from: u64, to: u64 },

    #[error("numerically singular incremental tangent map at step {step} (condition estimate {condition:.3e})")]
    DegenerateMap { step: u64, condition: f64 },

    #[error("cannot finalize a correlation grid with zero samples")]
    ZeroSamples,

    #[error("no response plateau found (tolerance {tolerance})")]
    NoPlateau { tolerance: f64 },

    #[error("underdetermined fit: {points} points for {params} parameters")]
    Underdetermined { points: usize, params: usize },

    #[error("averaging window too short: {0}")]
    WindowTooShort(String),
}
