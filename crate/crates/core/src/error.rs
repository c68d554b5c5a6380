use thiserror::Error;

/// Errors raised by the emulation engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix `{0}` is not positive definite (factorisation failed after jitter escalation)")]
    NotPositiveDefinite(String),

    #[error("improper prior is not sampleable: {0}")]
    ImproperPrior(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index ({row}, {col}) out of range for {rows}x{cols} matrix")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("improper posterior: weak prior needs n >= m + k, got n = {n}, m = {m}, k = {k}")]
    Propriety { n: usize, m: usize, k: usize },

    #[error("design cannot support mean function with {m} columns (rank-deficient H^T A^-1 H)")]
    RankDeficient { m: usize },

    #[error("optimisation failed in all {starts} starts (best log posterior {best_log_posterior})")]
    Optimisation {
        starts: usize,
        best_log_posterior: f64,
    },

    #[error("degenerate surface: estimated output variance {0} is not positive")]
    DegenerateSurface(f64),

    #[error("design: {0}")]
    Design(String),

    #[error("unknown simulator `{0}`")]
    UnknownSimulator(String),
}

pub type Result<T> = std::result::Result<T, Error>;
