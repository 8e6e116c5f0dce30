//! Cross-module invariants: naive re-implementations of both samplers pin the
//! production estimators to the literal nested-sum semantics, and randomized
//! problems exercise the operator-constant and distance properties.

use std::collections::HashMap;

use proptest::prelude::*;

use fredholm_mc::dtm::{dtm_order_estimate, dtm_solve, Allocation};
use fredholm_mc::grid::{Domain, GridFunction};
use fredholm_mc::problem::{FredholmProblem, FreeTerm, Kernel};
use fredholm_mc::recursive::recursive_solve;
use fredholm_mc::reference::{apply_operator, neumann_iterate};
use fredholm_mc::rng::estimator_stream;

fn tabulated_problem(g: usize, kernel_cells: &[f64], free_cells: &[f64]) -> FredholmProblem {
    let domain = Domain::new(1, g).unwrap();
    FredholmProblem::new(
        domain,
        Kernel::Tabulated {
            values: kernel_cells.to_vec(),
        },
        FreeTerm::Tabulated {
            values: free_cells.to_vec(),
        },
    )
    .unwrap()
}

/// Scales raw cells so the row-average norm stays safely below one.
fn contraction_scaled(raw: &[f64], g: usize) -> Vec<f64> {
    let max_abs = raw.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-9);
    raw.iter().map(|v| 0.9 * v / max_abs).collect::<Vec<_>>()[..g * g].to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_constants_obey_the_norm_ordering(
        raw in prop::collection::vec(-1.0f64..1.0, 64),
        free in prop::collection::vec(0.1f64..1.0, 8),
    ) {
        let g = 8;
        let p = tabulated_problem(g, &contraction_scaled(&raw, g), &free);
        prop_assert!(p.rho() >= 0.0);
        prop_assert!(p.rho() <= p.rho_bar() + 1e-15);
        prop_assert!(p.rho2() <= p.rho_bar() * p.rho_bar() + 1e-15);
        prop_assert!(p.beta() >= 0.0);
    }

    #[test]
    fn kernel_distance_is_a_semimetric(
        raw in prop::collection::vec(-1.0f64..1.0, 144),
        (a, b, c) in (0usize..12, 0usize..12, 0usize..12),
    ) {
        let g = 12;
        let ones = vec![1.0; g];
        let p = tabulated_problem(g, &contraction_scaled(&raw, g), &ones);
        prop_assert_eq!(p.kernel_distance(a, a), 0.0);
        prop_assert_eq!(p.kernel_distance(a, b), p.kernel_distance(b, a));
        let lhs = p.kernel_distance(a, c);
        let rhs = p.kernel_distance(a, b) + p.kernel_distance(b, c);
        prop_assert!(lhs <= rhs + 1e-9);
    }

    #[test]
    fn operator_is_linear(
        raw in prop::collection::vec(-1.0f64..1.0, 100),
        g1 in prop::collection::vec(-2.0f64..2.0, 10),
        g2 in prop::collection::vec(-2.0f64..2.0, 10),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let g = 10;
        let p = tabulated_problem(g, &contraction_scaled(&raw, g), &vec![1.0; g]);
        let domain = p.domain().clone();
        let f1 = GridFunction::new(domain.clone(), g1.clone()).unwrap();
        let f2 = GridFunction::new(domain.clone(), g2.clone()).unwrap();
        let combo = GridFunction::new(
            domain.clone(),
            g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect(),
        )
        .unwrap();
        let k1 = apply_operator(&p, &f1).unwrap();
        let k2 = apply_operator(&p, &f2).unwrap();
        let kc = apply_operator(&p, &combo).unwrap();
        for i in 0..g {
            let want = a * k1.values()[i] + b * k2.values()[i];
            prop_assert!((kc.values()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn replicate_draws_scale_linearly(r in 1u64..6) {
        let p = tabulated_problem(6, &contraction_scaled(&[0.5; 36], 6), &[1.0; 6]);
        let alloc = Allocation::manual(vec![5, 3]).unwrap();
        let est = dtm_solve(&p, &alloc, 3, r);
        prop_assert_eq!(est.draws.value(), r * alloc.dtm_draws());
        let rec = recursive_solve(&p, &alloc, 3, r);
        prop_assert_eq!(rec.draws.value(), r * alloc.recursive_draws());
    }
}

/// Naive dependent-trial estimate straight from the definition: for every
/// sample path multiply the kernel links and the free factor, then average;
/// the same paths serve every grid point.
fn naive_order_estimate(p: &FredholmProblem, d: usize, n: u64, seed: u64, rep: u64) -> Vec<f64> {
    let stream = estimator_stream(seed, rep, d as u64);
    let len = p.grid_len();
    let mut paths = Vec::new();
    for i in 0..n {
        let base = i * d as u64;
        let coords: Vec<usize> = (0..d as u64)
            .map(|r| stream.grid_index(base + r, len))
            .collect();
        paths.push(coords);
    }
    (0..len)
        .map(|t| {
            let mut acc = 0.0;
            for coords in &paths {
                let mut w = p.kernel_value(t, coords[0]);
                for pair in coords.windows(2) {
                    w *= p.kernel_value(pair[0], pair[1]);
                }
                w *= p.free_values()[coords[d - 1]];
                acc += w;
            }
            acc / n as f64
        })
        .collect()
}

#[test]
fn bucketed_dtm_estimate_matches_the_naive_nested_sum() {
    let g = 16;
    let domain = Domain::new(1, g).unwrap();
    let p = FredholmProblem::new(
        domain,
        Kernel::GaussianSmooth {
            lambda: 0.7,
            width: 0.6,
        },
        FreeTerm::Identity,
    )
    .unwrap();
    for (d, n) in [(1usize, 37u64), (2, 23), (3, 19), (4, 11)] {
        let (fast, draws) = dtm_order_estimate(&p, d, n, estimator_stream(55, 2, d as u64));
        assert_eq!(draws, n * d as u64);
        let slow = naive_order_estimate(&p, d, n, 55, 2);
        for (a, b) in fast.values().iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "d={d}");
        }
    }
}

/// Naive recursive evaluator: stage functions are closures over their sample
/// sets, evaluated recursively with memoization, exactly as the definition
/// reads. Only the final stage is restricted to the grid.
fn naive_recursive_mean(p: &FredholmProblem, counts: &[u64], seed: u64, rep: u64) -> Vec<f64> {
    let len = p.grid_len();
    let samples: Vec<Vec<usize>> = counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let stream = estimator_stream(seed, rep, i as u64 + 1);
            (0..n).map(|l| stream.grid_index(l, len)).collect()
        })
        .collect();

    fn eval(
        p: &FredholmProblem,
        samples: &[Vec<usize>],
        stage: usize,
        at: usize,
        memo: &mut HashMap<(usize, usize), f64>,
    ) -> f64 {
        if stage == 0 {
            return p.free_values()[at];
        }
        if let Some(&v) = memo.get(&(stage, at)) {
            return v;
        }
        let pts = &samples[stage - 1];
        let mut acc = 0.0;
        for &xi in pts {
            acc += p.kernel_value(at, xi) * eval(p, samples, stage - 1, xi, memo);
        }
        let v = p.free_values()[at] + acc / pts.len() as f64;
        memo.insert((stage, at), v);
        v
    }

    let mut memo = HashMap::new();
    (0..len)
        .map(|t| eval(p, &samples, counts.len(), t, &mut memo))
        .collect()
}

#[test]
fn bucketed_recursion_matches_the_naive_sample_path_evaluator() {
    let g = 12;
    let domain = Domain::new(1, g).unwrap();
    let p = FredholmProblem::new(
        domain,
        Kernel::GaussianSmooth {
            lambda: 0.8,
            width: 0.9,
        },
        FreeTerm::Identity,
    )
    .unwrap();
    let counts = vec![9u64, 17, 33];
    let alloc = Allocation::manual(counts.clone()).unwrap();
    let est = recursive_solve(&p, &alloc, 77, 2);
    for rep in 0..2u64 {
        let naive = naive_recursive_mean(&p, &counts, 77, rep);
        let fast = if rep == 0 {
            &est.mean
        } else {
            &est.replicates.as_ref().unwrap()[1]
        };
        for (a, b) in fast.values().iter().zip(&naive) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "rep={rep}");
        }
    }
}

#[test]
fn order_estimates_are_unbiased_for_the_series_terms() {
    let g = 24;
    let domain = Domain::new(1, g).unwrap();
    let p = FredholmProblem::new(
        domain,
        Kernel::Separable { lambda: 0.9 },
        FreeTerm::Identity,
    )
    .unwrap();
    let oracle = neumann_iterate(&p, 3);
    let reps = 2000u64;
    for d in 1..=3usize {
        let n = 16u64;
        let mut sums = vec![0.0; g];
        let mut sq = vec![0.0; g];
        for r in 0..reps {
            let (est, _) = dtm_order_estimate(&p, d, n, estimator_stream(606, r, d as u64));
            for (i, &v) in est.values().iter().enumerate() {
                sums[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..g {
            let mean = sums[i] / reps as f64;
            let var = (sq[i] / reps as f64 - mean * mean).max(0.0);
            let se = (var / reps as f64).sqrt();
            let gap = (mean - oracle.terms[d].values()[i]).abs();
            assert!(gap <= 5.0 * se + 1e-12, "d={d} i={i} gap={gap} se={se}");
        }
    }
}
