//! Deterministic oracle: grid quadrature of the integral operator, the
//! truncated series expansion, and the fixed-point solution with an a priori
//! depth rule. Ground truth for every Monte Carlo test in the crate.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::problem::FredholmProblem;

/// Depth cap guarding against an operator norm misconfigured to sit at 1.
pub const DEPTH_CAP: usize = 10_000;

/// Applies the integral operator by grid quadrature:
/// `K[g](t) = avg_s K(t,s) g(s)`. Linear in `g`.
pub fn apply_operator(problem: &FredholmProblem, g: &GridFunction) -> Result<GridFunction> {
    if g.domain() != problem.domain() {
        return Err(Error::DomainMismatch);
    }
    let n = problem.grid_len();
    let inv_n = 1.0 / n as f64;
    let gv = g.values();
    let mut out = vec![0.0; n];
    out.par_iter_mut().enumerate().for_each(|(i, slot)| {
        let row = problem.kernel_row(i);
        let mut acc = 0.0;
        for (k, v) in row.iter().zip(gv) {
            acc += k * v;
        }
        *slot = acc * inv_n;
    });
    GridFunction::new(problem.domain().clone(), out)
}

/// Per-order terms of the series expansion and their partial sum.
#[derive(Debug, Clone)]
pub struct NeumannExpansion {
    /// `terms[d]` is the d-th operator power applied to the free term;
    /// `terms[0]` is the free term itself.
    pub terms: Vec<GridFunction>,
    /// Sum of `terms[0..=depth]`, the depth-truncated solution.
    pub truncated: GridFunction,
}

/// Computes `terms[d]` for `d = 0..=depth` by repeated application of the
/// quadrature operator (never by explicit multidimensional products), plus
/// their sum.
pub fn neumann_iterate(problem: &FredholmProblem, depth: usize) -> NeumannExpansion {
    let mut terms = Vec::with_capacity(depth + 1);
    let mut sum = problem.free_grid();
    terms.push(problem.free_grid());
    for d in 1..=depth {
        let next = apply_operator(problem, &terms[d - 1]).expect("term lives on the problem grid");
        let values: Vec<f64> = sum
            .values()
            .iter()
            .zip(next.values())
            .map(|(a, b)| a + b)
            .collect();
        sum = GridFunction::new(problem.domain().clone(), values).expect("finite partial sum");
        terms.push(next);
    }
    NeumannExpansion {
        terms,
        truncated: sum,
    }
}

/// Fixed-point solution with its guaranteed truncation depth.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub solution: GridFunction,
    pub depth: usize,
}

/// Iterates until the a priori bound `|f| rho^(M+1) / (1-rho)` drops to
/// `tol`, so the result is within `tol` of the grid fixed point in sup norm.
pub fn solve_reference(problem: &FredholmProblem, tol: f64) -> Result<ReferenceSolution> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidParam("tolerance must be positive".into()));
    }
    let mut depth = 0usize;
    let mut term = problem.free_grid();
    let mut sum = problem.free_grid();
    while problem.truncation_bound(depth) > tol {
        if depth >= DEPTH_CAP {
            return Err(Error::DepthCapExceeded { cap: DEPTH_CAP });
        }
        depth += 1;
        term = apply_operator(problem, &term)?;
        let values: Vec<f64> = sum
            .values()
            .iter()
            .zip(term.values())
            .map(|(a, b)| a + b)
            .collect();
        sum = GridFunction::new(problem.domain().clone(), values)?;
    }
    Ok(ReferenceSolution {
        solution: sum,
        depth,
    })
}

/// Smallest depth `M >= 1` whose truncation bound is at most `eps`.
pub fn choose_depth(problem: &FredholmProblem, eps: f64) -> usize {
    assert!(eps > 0.0, "eps must be positive");
    let rho = problem.rho();
    let norm = problem.free_norm();
    let mut m = if rho == 0.0 || norm == 0.0 {
        1
    } else {
        // Closed-form candidate, then integer-correct it.
        let raw = (eps * (1.0 - rho) / norm).ln() / rho.ln() - 1.0;
        raw.ceil().max(1.0) as usize
    };
    while problem.truncation_bound(m) > eps {
        m += 1;
    }
    while m > 1 && problem.truncation_bound(m - 1) <= eps {
        m -= 1;
    }
    m
}
