//! Monte Carlo solvers for linear Fredholm integral equations of the second
//! kind `z = f + K[z]` on a gridded unit cube, with a deterministic quadrature
//! oracle and uniform-norm confidence bands.
//!
//! The crate provides two estimators over a shared problem description:
//!
//! * [`dtm::dtm_solve`] — the classical dependent-trial estimator, one shared
//!   sample set per series order, costing `sum_d d * n(d)` draws;
//! * [`recursive::recursive_solve`] — the stage recursion that resamples the
//!   previous stage's random function, costing only `sum_d n(d)` draws at the
//!   same convergence rate.
//!
//! [`reference`] computes the exact grid solution and per-order terms for
//! oracle comparisons; [`confidence`] builds asymptotic (simulated Gaussian
//! supremum) and non-asymptotic (subgaussian tail) bands around either
//! estimator. All randomness flows through splittable counter-based streams
//! ([`rng`]), so results are bit-reproducible under any thread schedule.

/// Crate version, echoed into experiment reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod confidence;
pub mod dtm;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod problem;
pub mod recursive;
pub mod reference;
pub mod rng;

pub use confidence::{
    asymptotic_band, calibrate_c3, empirical_covariance, fit_subgaussian_tail,
    gaussian_sup_quantile, subgaussian_band, BandKind, ConfidenceBand, CovarianceEstimate,
    CovarianceSource,
};
pub use dtm::{
    dtm_allocate, dtm_order_estimate, dtm_solve, dtm_variance_bound, Allocation, AllocationScheme,
    DrawCounter, SolutionEstimate,
};
pub use error::{Error, Result};
pub use grid::{Domain, GridFunction, Measure};
pub use problem::{FredholmProblem, FreeTerm, HolderDiagnostic, Kernel};
pub use recursive::{
    covariance_recursion, fit_variance_constant, geometric_allocate, recursive_solve,
    recursive_variance_bound, CovarianceFamilies, VarianceDecomposition,
};
pub use reference::{
    apply_operator, choose_depth, neumann_iterate, solve_reference, NeumannExpansion,
    ReferenceSolution,
};
pub use rng::{derived_seed, estimator_stream, Stream};
