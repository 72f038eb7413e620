use thiserror::Error;

use crate::optimize::OptimizationResult;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state became non-finite at t = {t} min")]
    NonFiniteState { t: f64 },

    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("trajectories were produced on different grids")]
    GridMismatch,

    #[error("no incident input exists in the searched range")]
    NoIncidentInput,

    #[error("lower bound {lambda} is infeasible; the achievable bound is {bound}")]
    Infeasible { lambda: f64, bound: f64 },

    #[error("solver did not converge after {iterations} iterations")]
    NotConverged {
        iterations: usize,
        best: Box<OptimizationResult>,
    },

    #[error("no feasible input on the search grid")]
    EmptyFeasibleSet,

    #[error("response shape is ambiguous: {0}")]
    AmbiguousShape(String),

    #[error("invalid scenario: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("failed to parse scenario: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line interface.
    ///
    /// 1: verification failure, 2: validation error, 3: numerical error,
    /// 4: infeasible problem.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Parse(_)
            | Error::GridTooCoarse(_)
            | Error::GridMismatch
            | Error::Io(_) => 2,
            Error::NonFiniteState { .. }
            | Error::NotConverged { .. }
            | Error::AmbiguousShape(_) => 3,
            Error::Infeasible { .. } | Error::NoIncidentInput | Error::EmptyFeasibleSet => 4,
        }
    }
}
