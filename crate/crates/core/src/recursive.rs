//! Recursive estimator: each stage resamples the previous stage's random
//! function at fresh points, so one replicate costs `sum_d n(d)` draws instead
//! of `sum_d d * n(d)`. Comes with the halving budget split, the product-form
//! variance decomposition, and the theoretical covariance surfaces.

use rayon::prelude::*;

use crate::dtm::{
    kernel_weighted_average, sample_grid_counts, Allocation, AllocationScheme, DrawCounter,
    SolutionEstimate,
};
use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::linalg::SquareMatrix;
use crate::problem::FredholmProblem;
use crate::reference::{apply_operator, neumann_iterate};
use crate::rng::estimator_stream;

/// Halving allocation: `n(M) = N/2, n(M-1) = N/4, ..., n(M-k) = N/2^(k+1)`.
///
/// Requires `N >= 4 * 2^(M+1)` so even the shallowest stage keeps at least
/// four samples.
pub fn geometric_allocate(depth: usize, budget: u64) -> Result<Allocation> {
    if depth == 0 {
        return Err(Error::InvalidParam("depth must be >= 1".into()));
    }
    if depth > 58 {
        return Err(Error::InvalidParam(format!(
            "depth {depth} is beyond any sane halving budget"
        )));
    }
    let required = 4u64 << (depth + 1);
    if budget < required {
        return Err(Error::BudgetGate {
            requested: budget,
            required,
        });
    }
    let counts: Vec<u64> = (1..=depth)
        .map(|d| (budget >> (depth - d + 1)).max(2))
        .collect();
    Allocation::with_scheme(counts, AllocationScheme::RecursiveGeometric)
}

/// Runs the stage recursion: stage m draws `n(m)` fresh lattice points,
/// evaluates the previous stage's function exactly at them (no interpolation)
/// and averages the kernel against those values. The returned mean is the
/// final stage restricted to the grid.
pub fn recursive_solve(
    problem: &FredholmProblem,
    alloc: &Allocation,
    seed: u64,
    replicates: u64,
) -> SolutionEstimate {
    assert!(replicates >= 1, "need at least one replicate");
    let depth = alloc.depth();
    let len = problem.grid_len();

    let run_one = |r: u64| {
        let mut stage = problem.free_values().to_vec();
        let mut snapshots = Vec::with_capacity(depth);
        let mut draws = 0u64;
        let mut counts = vec![0u64; len];
        let mut bucket = vec![0.0; len];
        let mut averaged = vec![0.0; len];
        for m in 1..=depth {
            let n = alloc.count(m);
            let stream = estimator_stream(seed, r, m as u64);
            counts.fill(0);
            draws += sample_grid_counts(stream, 0, n, &mut counts);
            // The sampled points are lattice points, so the exact values of
            // the previous stage at them are occupation-weighted entries.
            for (b, (&c, &v)) in bucket.iter_mut().zip(counts.iter().zip(stage.iter())) {
                *b = c as f64 * v;
            }
            kernel_weighted_average(problem, &bucket, n, &mut averaged);
            for ((s, &f), &a) in stage.iter_mut().zip(problem.free_values()).zip(&averaged) {
                *s = f + a;
            }
            snapshots.push(
                GridFunction::new(problem.domain().clone(), stage.clone())
                    .expect("finite stage values"),
            );
        }
        let mean = snapshots.last().expect("depth >= 1").clone();
        (mean, snapshots, draws)
    };

    let mut runs: Vec<(GridFunction, Vec<GridFunction>, u64)> =
        (0..replicates).into_par_iter().map(run_one).collect();

    let mut counter = DrawCounter::new();
    for run in &runs {
        counter.add(run.2);
    }
    let (mean, per_order, _) = runs.remove(0);
    let replicate_means = if replicates >= 2 {
        let mut all = Vec::with_capacity(replicates as usize);
        all.push(mean.clone());
        all.extend(runs.into_iter().map(|(m, _, _)| m));
        Some(all)
    } else {
        None
    };
    SolutionEstimate {
        mean,
        per_order,
        draws: counter,
        seed,
        allocation: alloc.clone(),
        replicates: replicate_means,
    }
}

/// Product-form variance decomposition of the recursive estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceDecomposition {
    /// `1/sqrt(n(M))`, `1/sqrt(n(M) n(M-1))`, ..., down to the product of all
    /// stage counts; strictly decreasing whenever every count is >= 2.
    pub sigma_terms: Vec<f64>,
    /// `constant_slot * sum of squared sigma terms`.
    pub bound: f64,
    /// The problem-dependent constant; the theory proves existence only, so
    /// it is configurable (default 1) or fitted from replicates.
    pub constant_slot: f64,
}

/// Evaluates the decomposition for an allocation and a constant slot.
pub fn recursive_variance_bound(alloc: &Allocation, constant: f64) -> VarianceDecomposition {
    assert!(constant > 0.0, "constant slot must be positive");
    let depth = alloc.depth();
    let mut sigma_terms = Vec::with_capacity(depth);
    let mut product = 1.0f64;
    let mut sum_sq = 0.0f64;
    for k in 0..depth {
        product *= alloc.count(depth - k) as f64;
        sigma_terms.push(1.0 / product.sqrt());
        sum_sq += 1.0 / product;
    }
    VarianceDecomposition {
        sigma_terms,
        bound: constant * sum_sq,
        constant_slot: constant,
    }
}

/// Fits the constant slot from replicate variance: the grid max of the
/// empirical pointwise variance divided by the sum of squared sigma terms.
pub fn fit_variance_constant(
    problem: &FredholmProblem,
    alloc: &Allocation,
    replicates: u64,
    seed: u64,
) -> Result<f64> {
    if replicates < 2 {
        return Err(Error::TooFewReplicates {
            got: replicates as usize,
        });
    }
    let est = recursive_solve(problem, alloc, seed, replicates);
    let reps = est.replicates.expect("replicates >= 2");
    let n = problem.grid_len();
    let r = reps.len() as f64;
    let mut max_var = 0.0f64;
    for i in 0..n {
        let mean = reps.iter().map(|g| g.values()[i]).sum::<f64>() / r;
        let var = reps
            .iter()
            .map(|g| {
                let d = g.values()[i] - mean;
                d * d
            })
            .sum::<f64>()
            / (r - 1.0);
        max_var = max_var.max(var);
    }
    let shape = recursive_variance_bound(alloc, 1.0).bound;
    Ok(max_var / shape)
}

/// Theoretical covariance surfaces of the stage fluctuations on grid x grid.
///
/// `families()[j-1]` belongs to stage `j` and lists, in order: the fresh
/// surface built from the exact stage-(j-1) function, then the once-, twice-,
/// ... smoothed surfaces of the earlier stages, each obtained by applying the
/// diagonal smoothing transform to the previous stage's family.
#[derive(Debug, Clone)]
pub struct CovarianceFamilies {
    families: Vec<Vec<SquareMatrix>>,
}

impl CovarianceFamilies {
    pub fn families(&self) -> &[Vec<SquareMatrix>] {
        &self.families
    }

    /// The family of the deepest stage.
    pub fn final_stage(&self) -> &[SquareMatrix] {
        self.families.last().expect("depth >= 1")
    }
}

/// Builds the covariance recursion up to `depth` stages.
pub fn covariance_recursion(problem: &FredholmProblem, depth: usize) -> CovarianceFamilies {
    assert!(depth >= 1, "depth must be >= 1");
    let expansion = neumann_iterate(problem, depth.saturating_sub(1));
    // Exact stage functions: x_0 = f, x_m = truncation at depth m.
    let mut stage_fns = Vec::with_capacity(depth);
    let mut partial = problem.free_grid();
    stage_fns.push(partial.clone());
    for d in 1..depth {
        let values: Vec<f64> = partial
            .values()
            .iter()
            .zip(expansion.terms[d].values())
            .map(|(a, b)| a + b)
            .collect();
        partial = GridFunction::new(problem.domain().clone(), values).expect("finite");
        stage_fns.push(partial.clone());
    }

    let mut families: Vec<Vec<SquareMatrix>> = Vec::with_capacity(depth);
    for (j, stage_fn) in stage_fns.iter().enumerate() {
        let mut family = vec![fresh_covariance(problem, stage_fn)];
        if j > 0 {
            for older in &families[j - 1] {
                family.push(smooth_diagonal(problem, older));
            }
        }
        families.push(family);
    }
    CovarianceFamilies { families }
}

/// Covariance of one sampling step against the exact previous-stage function:
/// `avg_s K(a,s) K(b,s) x(s)^2  -  K[x](a) K[x](b)`.
fn fresh_covariance(problem: &FredholmProblem, x: &GridFunction) -> SquareMatrix {
    let n = problem.grid_len();
    let inv_n = 1.0 / n as f64;
    let kx = apply_operator(problem, x).expect("stage function lives on the grid");
    let xv = x.values();
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(a, row)| {
        let ra = problem.kernel_row(a);
        for (b, slot) in row.iter_mut().enumerate() {
            let rb = problem.kernel_row(b);
            let mut acc = 0.0;
            for ((ka, kb), v) in ra.iter().zip(rb).zip(xv) {
                acc += ka * kb * v * v;
            }
            *slot = acc * inv_n - kx.values()[a] * kx.values()[b];
        }
    });
    SquareMatrix::from_data(n, data).expect("square by construction")
}

/// Diagonal smoothing transform:
/// `out(a,b) = avg_s K(a,s) K(b,s) R(s,s)`. Preserves positive
/// semidefiniteness because it is a nonnegative mixture of rank-one products.
fn smooth_diagonal(problem: &FredholmProblem, r: &SquareMatrix) -> SquareMatrix {
    let n = problem.grid_len();
    let inv_n = 1.0 / n as f64;
    let diag: Vec<f64> = (0..n).map(|s| r.get(s, s)).collect();
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(a, row)| {
        let ra = problem.kernel_row(a);
        for (b, slot) in row.iter_mut().enumerate() {
            let rb = problem.kernel_row(b);
            let mut acc = 0.0;
            for ((ka, kb), d) in ra.iter().zip(rb).zip(&diag) {
                acc += ka * kb * d;
            }
            *slot = acc * inv_n;
        }
    });
    SquareMatrix::from_data(n, data).expect("square by construction")
}
