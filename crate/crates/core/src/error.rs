//! Error type shared by the solver library.

use std::fmt;

/// Everything that can go wrong while building a problem or running a solver.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// The operator norm is not below one, so the fixed-point iteration and
    /// every estimator built on it would diverge.
    ContractionViolated { rho: f64 },
    /// The free term vanishes at every grid point.
    ZeroFreeTerm,
    /// A kernel or free-term value is NaN or infinite.
    NonFiniteValue { what: &'static str },
    /// Two grid functions (or a function and a problem) live on different grids.
    DomainMismatch,
    /// The fixed-point iteration hit the depth cap; the operator norm is too
    /// close to one for the requested tolerance.
    DepthCapExceeded { cap: usize },
    /// A draw budget below the smallest feasible allocation.
    BudgetTooSmall { requested: u64, minimum: u64 },
    /// The halving allocation needs a budget well above 2^(depth+1).
    BudgetGate { requested: u64, required: u64 },
    /// Covariance estimation needs at least two replicates.
    TooFewReplicates { got: usize },
    /// Covariance factorization failed even after jitter escalation.
    FactorizationFailed,
    /// The diagnostic needs a finer grid.
    GridTooCoarse { needed: usize, got: usize },
    /// Parameter outside its documented range.
    InvalidParam(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ContractionViolated { rho } => write!(
                f,
                "contraction violated: operator norm rho = {rho} must be < 1"
            ),
            Error::ZeroFreeTerm => write!(f, "free term is identically zero on the grid"),
            Error::NonFiniteValue { what } => write!(f, "non-finite value in {what}"),
            Error::DomainMismatch => write!(f, "grid function does not match the problem grid"),
            Error::DepthCapExceeded { cap } => write!(
                f,
                "fixed-point depth cap {cap} exceeded; rho is too close to 1 for this tolerance"
            ),
            Error::BudgetTooSmall { requested, minimum } => write!(
                f,
                "draw budget {requested} too small; minimum feasible budget is {minimum}"
            ),
            Error::BudgetGate {
                requested,
                required,
            } => write!(
                f,
                "budget gate: halving allocation needs N >= 4*2^(M+1) = {required}, got {requested}"
            ),
            Error::TooFewReplicates { got } => {
                write!(f, "need at least 2 replicates, got {got}")
            }
            Error::FactorizationFailed => {
                write!(f, "covariance factorization failed after jitter escalation")
            }
            Error::GridTooCoarse { needed, got } => write!(
                f,
                "grid too coarse: need at least {needed} points per axis, got {got}"
            ),
            Error::InvalidParam(msg) => write!(f, "invalid parameter: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
