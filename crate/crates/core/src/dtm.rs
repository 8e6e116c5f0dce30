//! Classical dependent-trial estimator: one shared sample set per order feeds
//! every evaluation point, orders are summed over a truncation depth, and the
//! draw budget `sum_d d * n(d)` is split by an explicit variance-minimizing
//! allocation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::problem::FredholmProblem;
use crate::rng::{estimator_stream, Stream};

/// How the per-order sample counts were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationScheme {
    /// Variance-minimizing split of the dependent-trial draw budget.
    DtmOptimal,
    /// Halving scheme for the recursive estimator: `n(M-k) = N / 2^(k+1)`.
    RecursiveGeometric,
    /// Caller-provided counts.
    Manual,
}

impl AllocationScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            AllocationScheme::DtmOptimal => "dtm_optimal",
            AllocationScheme::RecursiveGeometric => "geometric",
            AllocationScheme::Manual => "manual",
        }
    }
}

/// Truncation depth plus per-order sample counts `n(1..=M)`.
///
/// Every count is at least 2 so replicate variances stay estimable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    counts: Vec<u64>,
    scheme: AllocationScheme,
}

impl Allocation {
    pub fn manual(counts: Vec<u64>) -> Result<Self> {
        Self::with_scheme(counts, AllocationScheme::Manual)
    }

    pub(crate) fn with_scheme(counts: Vec<u64>, scheme: AllocationScheme) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidParam("allocation needs depth >= 1".into()));
        }
        if let Some(&bad) = counts.iter().find(|&&c| c < 2) {
            return Err(Error::InvalidParam(format!(
                "every sample count must be >= 2, got {bad}"
            )));
        }
        Ok(Allocation { counts, scheme })
    }

    pub fn depth(&self) -> usize {
        self.counts.len()
    }

    /// Sample count of order `d` (1-based).
    pub fn count(&self, d: usize) -> u64 {
        self.counts[d - 1]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Count of the deepest order, `n(M)`; the normalization the confidence
    /// bands scale by (equals half the budget under the halving scheme).
    pub fn last_count(&self) -> u64 {
        *self.counts.last().expect("allocation is non-empty")
    }

    pub fn scheme(&self) -> AllocationScheme {
        self.scheme
    }

    /// Dependent-trial draw cost of one replicate: `sum_d d * n(d)`.
    pub fn dtm_draws(&self) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, &n)| (i as u64 + 1) * n)
            .sum()
    }

    /// Recursive draw cost of one replicate: `sum_d n(d)`.
    pub fn recursive_draws(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Number of scalar measure-distributed variates consumed so far.
/// Incremented by the samplers themselves, never recomputed from formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DrawCounter {
    draws: u64,
}

impl DrawCounter {
    pub fn new() -> Self {
        DrawCounter { draws: 0 }
    }

    pub fn add(&mut self, n: u64) {
        self.draws += n;
    }

    pub fn value(&self) -> u64 {
        self.draws
    }
}

/// Output record of a Monte Carlo solve.
#[derive(Debug, Clone)]
pub struct SolutionEstimate {
    /// The estimator value of the first replicate.
    pub mean: GridFunction,
    /// First replicate's per-order estimates (classical method) or per-stage
    /// grid restrictions (recursive method).
    pub per_order: Vec<GridFunction>,
    /// Total variates consumed over all replicates.
    pub draws: DrawCounter,
    pub seed: u64,
    pub allocation: Allocation,
    /// All replicate values, present when at least two were run.
    pub replicates: Option<Vec<GridFunction>>,
}

impl SolutionEstimate {
    /// Replicate values, or the single mean when only one replicate ran.
    pub fn replicate_values(&self) -> Vec<&GridFunction> {
        match &self.replicates {
            Some(r) => r.iter().collect(),
            None => vec![&self.mean],
        }
    }
}

/// Draws `n` lattice indices from the stream (starting at `start_index`) and
/// accumulates occupation counts. Returns the number of variates consumed.
pub(crate) fn sample_grid_counts(
    stream: Stream,
    start_index: u64,
    n: u64,
    counts: &mut [u64],
) -> u64 {
    let len = counts.len();
    let mut draws = 0u64;
    for l in 0..n {
        counts[stream.grid_index(start_index + l, len)] += 1;
        draws += 1;
    }
    draws
}

/// `out[t] = (1/n) * sum_h K(t, s_h) * bucket[h]`; the shared final step of
/// both estimators, so depth-one runs agree bit for bit.
pub(crate) fn kernel_weighted_average(
    problem: &FredholmProblem,
    bucket: &[f64],
    n: u64,
    out: &mut [f64],
) {
    let inv_n = 1.0 / n as f64;
    for (i, slot) in out.iter_mut().enumerate() {
        let row = problem.kernel_row(i);
        let mut acc = 0.0;
        for (k, w) in row.iter().zip(bucket) {
            acc += k * w;
        }
        *slot = acc * inv_n;
    }
}

/// One-order dependent-trial estimate with `n` sample paths of length `d`:
/// the same paths feed every grid point. Returns the estimate and the number
/// of variates consumed (`n * d`).
pub fn dtm_order_estimate(
    problem: &FredholmProblem,
    d: usize,
    n: u64,
    stream: Stream,
) -> (GridFunction, u64) {
    assert!(d >= 1, "order must be >= 1");
    assert!(n >= 2, "sample count must be >= 2");
    let len = problem.grid_len();
    let mut bucket = vec![0.0; len];
    let mut draws = 0u64;
    if d == 1 {
        // Single-coordinate paths reduce to occupation counts, shared with
        // the first stage of the recursive estimator.
        let mut counts = vec![0u64; len];
        draws += sample_grid_counts(stream, 0, n, &mut counts);
        for (b, (&c, &f)) in bucket
            .iter_mut()
            .zip(counts.iter().zip(problem.free_values()))
        {
            *b = c as f64 * f;
        }
    } else {
        for i in 0..n {
            let base = i * d as u64;
            let first = stream.grid_index(base, len);
            draws += 1;
            let mut weight = 1.0;
            let mut prev = first;
            for r in 1..d {
                let next = stream.grid_index(base + r as u64, len);
                draws += 1;
                weight *= problem.kernel_value(prev, next);
                prev = next;
            }
            weight *= problem.free_values()[prev];
            bucket[first] += weight;
        }
    }
    let mut out = vec![0.0; len];
    kernel_weighted_average(problem, &bucket, n, &mut out);
    (
        GridFunction::new(problem.domain().clone(), out).expect("finite estimate"),
        draws,
    )
}

/// Full dependent-trial solve: independent streams per order, `replicates`
/// independent repetitions of the whole estimator, exact draw accounting.
pub fn dtm_solve(
    problem: &FredholmProblem,
    alloc: &Allocation,
    seed: u64,
    replicates: u64,
) -> SolutionEstimate {
    assert!(replicates >= 1, "need at least one replicate");
    let depth = alloc.depth();
    let run_one = |r: u64| {
        let mut per_order = Vec::with_capacity(depth);
        let mut draws = 0u64;
        let mut mean = problem.free_values().to_vec();
        for d in 1..=depth {
            let stream = estimator_stream(seed, r, d as u64);
            let (est, dr) = dtm_order_estimate(problem, d, alloc.count(d), stream);
            draws += dr;
            for (m, v) in mean.iter_mut().zip(est.values()) {
                *m += v;
            }
            per_order.push(est);
        }
        let mean = GridFunction::new(problem.domain().clone(), mean).expect("finite mean");
        (mean, per_order, draws)
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

/// A priori variance bound of the dependent-trial estimator:
/// `|f|^2 * sum_d rho2^d / n(d)`.
pub fn dtm_variance_bound(problem: &FredholmProblem, alloc: &Allocation) -> f64 {
    let norm2 = problem.free_norm().powi(2);
    let rho2 = problem.rho2();
    alloc
        .counts()
        .iter()
        .enumerate()
        .map(|(i, &n)| rho2.powi(i as i32 + 1) / n as f64)
        .sum::<f64>()
        * norm2
}

/// Variance-minimizing allocation of a dependent-trial draw budget.
///
/// The continuous optimum `n(d) ~ sqrt(rho2^d / d)` is scaled to the budget,
/// floored to integers with minimum 2, and leftover budget goes greedily to
/// the order with the largest variance reduction per unit cost.
pub fn dtm_allocate(problem: &FredholmProblem, depth: usize, budget: u64) -> Result<Allocation> {
    if depth == 0 {
        return Err(Error::InvalidParam("depth must be >= 1".into()));
    }
    let minimum: u64 = (1..=depth as u64).map(|d| 2 * d).sum();
    if budget < minimum {
        return Err(Error::BudgetTooSmall {
            requested: budget,
            minimum,
        });
    }
    let rho2 = problem.rho2();
    let mut weights: Vec<f64> = (1..=depth)
        .map(|d| (rho2.powi(d as i32) / d as f64).sqrt())
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        // Degenerate kernel: any split has zero variance.
        weights = vec![1.0; depth];
    }
    let denom: f64 = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i + 1) as f64 * w)
        .sum();
    let mut counts: Vec<u64> = weights
        .iter()
        .map(|w| ((budget as f64 * w / denom).floor() as u64).max(2))
        .collect();

    let cost = |c: &[u64]| -> u64 { c.iter().enumerate().map(|(i, &n)| (i as u64 + 1) * n).sum() };

    // Clamping to the minimum can overshoot; undo it where it hurts least.
    while cost(&counts) > budget {
        let d = (0..depth)
            .filter(|&i| counts[i] > 2)
            .min_by(|&a, &b| {
                let pain = |i: usize| {
                    rho2.powi(i as i32 + 1)
                        / (counts[i] as f64 * (counts[i] - 1) as f64)
                        / (i + 1) as f64
                };
                pain(a).total_cmp(&pain(b))
            })
            .expect("budget >= minimum keeps a shrinkable order");
        counts[d] -= 1;
    }

    // Spend what is left where the marginal variance drop per cost is largest.
    loop {
        let remaining = budget - cost(&counts);
        let candidate = (0..depth)
            .filter(|&i| (i as u64 + 1) <= remaining)
            .max_by(|&a, &b| {
                let gain = |i: usize| {
                    rho2.powi(i as i32 + 1)
                        / (counts[i] as f64 * (counts[i] + 1) as f64)
                        / (i + 1) as f64
                };
                gain(a).total_cmp(&gain(b)).then(b.cmp(&a)) // ties: lowest order wins
            });
        match candidate {
            Some(d) => counts[d] += 1,
            None => break,
        }
    }

    debug_assert!(cost(&counts) <= budget);
    Allocation::with_scheme(counts, AllocationScheme::DtmOptimal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Domain;
    use crate::problem::{FreeTerm, Kernel};
    use crate::reference::neumann_iterate;

    fn problem(g: usize, kernel: Kernel, free: FreeTerm) -> FredholmProblem {
        FredholmProblem::new(Domain::new(1, g).unwrap(), kernel, free).unwrap()
    }

    #[test]
    fn constant_kernel_order_two_is_deterministic() {
        let p = problem(16, Kernel::Constant { lambda: 0.5 }, FreeTerm::One);
        for seed in [1u64, 2, 3] {
            let (est, draws) = dtm_order_estimate(&p, 2, 50, estimator_stream(seed, 0, 2));
            assert_eq!(draws, 100);
            for &v in est.values() {
                assert_eq!(v, 0.25);
            }
        }
    }

    #[test]
    fn order_estimate_scales_linearly_in_the_free_term() {
        let g = 16;
        let base: Vec<f64> = (0..g).map(|i| 0.3 + (i as f64) / g as f64).collect();
        let doubled: Vec<f64> = base.iter().map(|v| 2.0 * v).collect();
        let kernel = Kernel::Separable { lambda: 0.8 };
        let p1 = problem(g, kernel.clone(), FreeTerm::Tabulated { values: base });
        let p2 = problem(g, kernel, FreeTerm::Tabulated { values: doubled });
        let s = estimator_stream(9, 0, 3);
        let (e1, _) = dtm_order_estimate(&p1, 3, 200, s);
        let (e2, _) = dtm_order_estimate(&p2, 3, 200, s);
        for (a, b) in e1.values().iter().zip(e2.values()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn depth_one_estimate_obeys_the_law_of_large_numbers() {
        let g = 64;
        let p = problem(g, Kernel::Separable { lambda: 1.0 }, FreeTerm::Identity);
        let oracle = neumann_iterate(&p, 1);
        let (est, _) = dtm_order_estimate(&p, 1, 100_000, estimator_stream(2024, 0, 1));
        let err = est.sup_distance(&oracle.terms[1]).unwrap();
        assert!(err <= 0.004, "err {err}");
    }

    #[test]
    fn solve_on_constant_kernel_is_exact_with_zero_variance() {
        let p = problem(16, Kernel::Constant { lambda: 0.5 }, FreeTerm::One);
        let alloc = Allocation::manual(vec![8, 4, 2]).unwrap();
        let est = dtm_solve(&p, &alloc, 7, 5);
        for &v in est.mean.values() {
            assert_eq!(v, 1.875);
        }
        for rep in est.replicates.as_ref().unwrap() {
            assert_eq!(rep, &est.mean);
        }
    }

    #[test]
    fn mean_is_free_term_plus_order_estimates_exactly() {
        let p = problem(32, Kernel::Separable { lambda: 0.9 }, FreeTerm::Identity);
        let alloc = Allocation::manual(vec![16, 8, 4]).unwrap();
        let est = dtm_solve(&p, &alloc, 11, 1);
        for (i, &m) in est.mean.values().iter().enumerate() {
            let rebuilt = p.free_values()[i]
                + est.per_order[0].values()[i]
                + est.per_order[1].values()[i]
                + est.per_order[2].values()[i];
            assert_eq!(m, rebuilt);
        }
        assert!(est.replicates.is_none());
    }

    #[test]
    fn draw_accounting_is_exact() {
        let p = problem(16, Kernel::Separable { lambda: 0.9 }, FreeTerm::Identity);
        let alloc = Allocation::manual(vec![10, 7, 3]).unwrap();
        let replicates = 4;
        let est = dtm_solve(&p, &alloc, 5, replicates);
        assert_eq!(est.draws.value(), replicates * alloc.dtm_draws());
        assert_eq!(alloc.dtm_draws(), 10 + 2 * 7 + 3 * 3);
    }

    #[test]
    fn identical_inputs_reproduce_bit_identical_estimates() {
        let p = problem(
            32,
            Kernel::GaussianSmooth {
                lambda: 0.6,
                width: 0.8,
            },
            FreeTerm::One,
        );
        let alloc = Allocation::manual(vec![6, 2]).unwrap();
        let a = dtm_solve(&p, &alloc, 99, 3);
        let b = dtm_solve(&p, &alloc, 99, 3);
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.replicates, b.replicates);
        assert_eq!(a.draws, b.draws);
    }

    #[test]
    fn variance_bound_formula() {
        let p = problem(16, Kernel::Constant { lambda: 0.5 }, FreeTerm::One);
        let alloc = Allocation::manual(vec![100, 100]).unwrap();
        let bound = dtm_variance_bound(&p, &alloc);
        assert!((bound - 0.003125).abs() < 1e-15);
        assert_eq!(
            dtm_variance_bound(&p, &Allocation::manual(vec![200, 200]).unwrap()) * 2.0,
            bound
        );
    }

    #[test]
    fn gridmax_error_stays_within_five_sigma_of_the_bound() {
        let g = 64;
        let p = problem(g, Kernel::Separable { lambda: 0.9 }, FreeTerm::Identity);
        let depth = 6;
        let alloc = dtm_allocate(&p, depth, 1_000_000).unwrap();
        let est = dtm_solve(&p, &alloc, 31, 1);
        let oracle = neumann_iterate(&p, depth).truncated;
        let err = est.mean.sup_distance(&oracle).unwrap();
        let bound = dtm_variance_bound(&p, &alloc);
        assert!(
            err <= 5.0 * bound.sqrt(),
            "err {err} vs {}",
            5.0 * bound.sqrt()
        );
    }

    #[test]
    fn allocate_single_order_takes_whole_budget() {
        let p = problem(16, Kernel::Constant { lambda: 0.5 }, FreeTerm::One);
        let alloc = dtm_allocate(&p, 1, 1234).unwrap();
        assert_eq!(alloc.counts(), &[1234]);
    }

    #[test]
    fn allocate_matches_continuous_optimum_within_one_percent() {
        // rho2 = 0.25 via a constant kernel of 0.5.
        let p = problem(16, Kernel::Constant { lambda: 0.5 }, FreeTerm::One);
        let budget = 3000;
        let alloc = dtm_allocate(&p, 2, budget).unwrap();
        assert!(alloc.dtm_draws() <= budget);
        assert!(
            (1700..=1800).contains(&alloc.count(1)),
            "{:?}",
            alloc.counts()
        );
        assert!(
            (590..=660).contains(&alloc.count(2)),
            "{:?}",
            alloc.counts()
        );
        let bound = dtm_variance_bound(&p, &alloc);
        // Continuous optimum of the bound under the same budget.
        let rho2 = p.rho2();
        let optimum = (1..=2)
            .map(|d| (d as f64 * rho2.powi(d)).sqrt())
            .sum::<f64>()
            .powi(2)
            / budget as f64;
        assert!(
            bound <= optimum * 1.01,
            "bound {bound} vs optimum {optimum}"
        );
    }

    #[test]
    fn allocate_rejects_infeasible_budget() {
        let p = problem(16, Kernel::Constant { lambda: 0.5 }, FreeTerm::One);
        let err = dtm_allocate(&p, 4, 10).unwrap_err();
        assert_eq!(
            err,
            Error::BudgetTooSmall {
                requested: 10,
                minimum: 20
            }
        );
    }

    #[test]
    fn optimized_bound_scales_inversely_with_budget() {
        let p = problem(16, Kernel::Constant { lambda: 0.5 }, FreeTerm::One);
        let mut points = Vec::new();
        for budget in [1_000u64, 10_000, 100_000, 1_000_000] {
            let alloc = dtm_allocate(&p, 4, budget).unwrap();
            points.push(((budget as f64).ln(), dtm_variance_bound(&p, &alloc).ln()));
        }
        let slope = fit_slope(&points);
        assert!((slope + 1.0).abs() <= 0.05, "slope {slope}");
    }

    fn fit_slope(points: &[(f64, f64)]) -> f64 {
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        sxy / sxx
    }

    #[test]
    fn allocation_validation() {
        assert!(Allocation::manual(vec![]).is_err());
        assert!(Allocation::manual(vec![4, 1]).is_err());
        let a = Allocation::manual(vec![4, 2]).unwrap();
        assert_eq!(a.depth(), 2);
        assert_eq!(a.count(1), 4);
        assert_eq!(a.last_count(), 2);
        assert_eq!(a.recursive_draws(), 6);
        assert_eq!(a.dtm_draws(), 8);
    }
}
