//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// An iterative solver ran out of iterations.
    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    Convergence { residual: f64, iterations: usize },

    /// An optimizer iterate left the admissible range.
    #[error("iterate diverged at step {step}")]
    Divergence { step: usize },

    /// A constant ledger could not be constructed from the given inputs.
    #[error("infeasible constants: {constraint}")]
    Infeasible { constraint: String },

    /// A numerical routine produced non-finite or inconsistent output.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Not enough data for a statistical estimate.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Malformed configuration or input file.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 config, 2 numerical/solver, 3 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Io(_) => 1,
            _ => 2,
        }
    }
}
