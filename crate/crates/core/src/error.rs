use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by identification, set arithmetic, synthesis and control.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("all singular values fall below the truncation tolerance")]
    RankZero,

    #[error("tightened set is empty: row {row} has offset {offset:.6e} after subtracting support {support:.6e}")]
    EmptyTightenedSet { row: usize, offset: f64, support: f64 },

    #[error("error dynamics are not contractive (observed radius ratio {ratio:.4})")]
    NotContractive { ratio: f64 },

    #[error("quadratic stability LMI infeasible; most violated vertex {vertex} (margin {margin:.3e})")]
    QuadraticStabilityFailure { vertex: usize, margin: f64 },

    #[error("semidefinite solver stalled after {iterations} iterations (gap {gap:.3e})")]
    SolverStall { iterations: usize, gap: f64 },

    #[error("initial MPC problem infeasible (status {status})")]
    InitialInfeasibility { status: String },

    #[error("parameter forecast unavailable: need values up to step {needed}, signal covers {available} (the parameter must be known over the whole prediction horizon)")]
    ForecastUnavailable { needed: usize, available: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        }
    }

    /// True for failures of the numerical pipeline (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankZero
                | Error::EmptyTightenedSet { .. }
                | Error::NotContractive { .. }
                | Error::QuadraticStabilityFailure { .. }
                | Error::SolverStall { .. }
                | Error::InitialInfeasibility { .. }
        )
    }
}

pub(crate) fn ensure_finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
