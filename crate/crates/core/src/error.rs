use thiserror::Error;

use crate::qp::SolveStatus;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file. `location` names the line/row/field when known.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Input parsed but violates a model invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("power flow did not converge after {iterations} iterations (max mismatch {mismatch:.3e})")]
    NonConvergence { iterations: usize, mismatch: f64 },

    /// The optimizer stopped without an optimal point. `certificate` holds the
    /// infeasibility certificate (dual ray for infeasible problems, primal ray
    /// for unbounded ones) or the last iterate for `MaxIterations`.
    #[error("solver returned {status:?}")]
    Solver {
        status: SolveStatus,
        certificate: Vec<f64>,
    },

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    /// True when the failure is an infeasibility verdict rather than bad input.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Error::Solver {
                status: SolveStatus::PrimalInfeasible | SolveStatus::DualInfeasible,
                ..
            }
        )
    }
}
