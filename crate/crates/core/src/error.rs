use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state {state} is infeasible for the {n}-agent domain at counts {counts:?}")]
    InfeasibleState {
        state: usize,
        n: usize,
        counts: Vec<u32>,
    },

    #[error("uncertainty set is empty: {0}")]
    InfeasibleSet(String),

    #[error("degenerate ball: {0}")]
    DegenerateBall(String),

    #[error("{what} did not converge after {iterations} iterations (best value {best})")]
    NonConvergence {
        what: String,
        iterations: usize,
        best: f64,
    },

    #[error("outcome count {count} exceeds the exact-enumeration cap {cap}; use the Monte Carlo estimator")]
    Budget { count: f64, cap: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
