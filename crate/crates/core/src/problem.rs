//! Problem definition: domain, kernel, free term, and the operator constants
//! and kernel distances every estimator and confidence band needs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Domain, GridFunction};

/// Kernel of the integral operator, from a fixed registry of parametric forms
/// plus a tabulated form. Arbitrary user expressions are out of scope.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    /// `K(t,s) = lambda`.
    Constant { lambda: f64 },
    /// `K(t,s) = lambda * prod_a t_a * s_a`.
    Separable { lambda: f64 },
    /// `K(t,s) = lambda * exp(-|t-s|^2 / width^2)`.
    GaussianSmooth { lambda: f64, width: f64 },
    /// Values on grid x grid, row major: `values[i * n + j] = K(t_i, s_j)`.
    /// Off-grid evaluation interpolates multilinearly in both arguments.
    Tabulated { values: Vec<f64> },
}

impl Kernel {
    /// Evaluate at arbitrary points of the cube.
    pub fn eval(&self, domain: &Domain, t: &[f64], s: &[f64]) -> f64 {
        match self {
            Kernel::Constant { lambda } => *lambda,
            Kernel::Separable { lambda } => {
                lambda * t.iter().zip(s).map(|(a, b)| a * b).product::<f64>()
            }
            Kernel::GaussianSmooth { lambda, width } => {
                let d2: f64 = t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
                lambda * (-d2 / (width * width)).exp()
            }
            Kernel::Tabulated { values } => {
                let n = domain.grid_len();
                let tw = corner_weights(domain, t);
                let sw = corner_weights(domain, s);
                let mut acc = 0.0;
                for &(i, wi) in &tw {
                    for &(j, wj) in &sw {
                        acc += wi * wj * values[i * n + j];
                    }
                }
                acc
            }
        }
    }
}

/// Lattice corners of the cell containing `x`, with multilinear weights.
fn corner_weights(domain: &Domain, x: &[f64]) -> Vec<(usize, f64)> {
    let g = domain.grid_per_axis();
    let scale = (g - 1) as f64;
    // Per-axis lower index and fraction.
    let axes: Vec<(usize, f64)> = x
        .iter()
        .map(|&c| {
            let y = (c.clamp(0.0, 1.0)) * scale;
            let i0 = (y.floor() as usize).min(g - 2);
            (i0, y - i0 as f64)
        })
        .collect();
    let mut acc = vec![(0usize, 1.0f64)];
    let mut stride = 1usize;
    for &(i0, frac) in &axes {
        let mut next = Vec::with_capacity(acc.len() * 2);
        for &(idx, w) in &acc {
            if frac < 1.0 {
                next.push((idx + i0 * stride, w * (1.0 - frac)));
            }
            if frac > 0.0 {
                next.push((idx + (i0 + 1) * stride, w * frac));
            }
        }
        acc = next;
        stride *= g;
    }
    acc
}

/// Free term of the equation.
#[derive(Debug, Clone, PartialEq)]
pub enum FreeTerm {
    /// `f(t) = 1`.
    One,
    /// `f(t) = t_1` (first coordinate).
    Identity,
    /// Values on the grid.
    Tabulated { values: Vec<f64> },
}

impl FreeTerm {
    fn grid_values(&self, domain: &Domain) -> Result<Vec<f64>> {
        let n = domain.grid_len();
        let values = match self {
            FreeTerm::One => vec![1.0; n],
            FreeTerm::Identity => (0..n).map(|i| domain.point(i)[0]).collect(),
            FreeTerm::Tabulated { values } => {
                if values.len() != n {
                    return Err(Error::DomainMismatch);
                }
                values.clone()
            }
        };
        Ok(values)
    }
}

/// Outcome of the smoothness diagnostic: a least-squares fit of
/// `log d(t1,t2)` against `log |t1 - t2|` over all grid pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderDiagnostic {
    /// Fitted exponent.
    pub alpha: f64,
    /// Fitted constant (exp of the intercept).
    pub constant: f64,
    /// Set when every kernel distance is zero (kernel constant in t); the
    /// fitted values are meaningless then.
    pub degenerate: bool,
}

/// Largest grid a problem will build its kernel matrix for.
pub const MAX_PROBLEM_GRID_LEN: usize = 4096;

/// The equation `z = f + K[z]` on a concrete grid, with cached operator
/// constants. Immutable after construction; all operations are pure.
#[derive(Debug, Clone)]
pub struct FredholmProblem {
    domain: Domain,
    kernel: Kernel,
    free_term: FreeTerm,
    /// Row major `K(t_i, s_j)` on the lattice.
    kernel_matrix: Vec<f64>,
    free_values: Vec<f64>,
    rho: f64,
    rho_bar: f64,
    rho2: f64,
    beta: f64,
}

impl FredholmProblem {
    /// Builds the grid restriction of the problem and its operator constants.
    ///
    /// Fails when the operator norm is >= 1, the free term vanishes
    /// identically, or any tabulated value is non-finite.
    pub fn new(domain: Domain, kernel: Kernel, free_term: FreeTerm) -> Result<Self> {
        let n = domain.grid_len();
        if n > MAX_PROBLEM_GRID_LEN {
            return Err(Error::InvalidParam(format!(
                "problem grid of {n} points exceeds the cap of {MAX_PROBLEM_GRID_LEN}"
            )));
        }
        validate_kernel_params(&kernel, n)?;

        let points: Vec<Vec<f64>> = (0..n).map(|i| domain.point(i)).collect();
        let kernel_matrix: Vec<f64> = match &kernel {
            Kernel::Tabulated { values } => values.clone(),
            _ => {
                let mut m = vec![0.0; n * n];
                m.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot = kernel.eval(&domain, &points[i], &points[j]);
                    }
                });
                m
            }
        };
        if !kernel_matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue { what: "kernel" });
        }

        let free_values = free_term.grid_values(&domain)?;
        if !free_values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue { what: "free term" });
        }
        if free_values.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroFreeTerm);
        }

        let inv_n = 1.0 / n as f64;
        let (rho, rho_bar, rho2) = kernel_matrix
            .par_chunks(n)
            .map(|row| {
                let mut abs_sum = 0.0;
                let mut sq_sum = 0.0;
                let mut max_abs = 0.0_f64;
                for &k in row {
                    abs_sum += k.abs();
                    sq_sum += k * k;
                    max_abs = max_abs.max(k.abs());
                }
                (abs_sum * inv_n, max_abs, sq_sum * inv_n)
            })
            .reduce(
                || (0.0, 0.0, 0.0),
                |a, b| (a.0.max(b.0), a.1.max(b.1), a.2.max(b.2)),
            );

        let beta = (0..n)
            .into_par_iter()
            .map(|a| {
                let row_a = &kernel_matrix[a * n..(a + 1) * n];
                let mut best = 0.0_f64;
                for b in a..n {
                    let row_b = &kernel_matrix[b * n..(b + 1) * n];
                    let mut acc = 0.0;
                    for (x, y) in row_a.iter().zip(row_b) {
                        acc += (x * y).abs();
                    }
                    best = best.max(acc * inv_n);
                }
                best
            })
            .reduce(|| 0.0_f64, f64::max);

        if rho >= 1.0 {
            return Err(Error::ContractionViolated { rho });
        }

        Ok(FredholmProblem {
            domain,
            kernel,
            free_term,
            kernel_matrix,
            free_values,
            rho,
            rho_bar,
            rho2,
            beta,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn free_term(&self) -> &FreeTerm {
        &self.free_term
    }

    /// Operator norm: max over t of the grid average of `|K(t, .)|`.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Max of `|K|` over grid x grid.
    pub fn rho_bar(&self) -> f64 {
        self.rho_bar
    }

    /// Norm of the squared-kernel operator: max over t of the grid average of
    /// `K(t, .)^2`; controls the per-order Monte Carlo variance.
    pub fn rho2(&self) -> f64 {
        self.rho2
    }

    /// Max over pairs (t1, t2) of the grid average of `|K(t1,.) K(t2,.)|`.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn grid_len(&self) -> usize {
        self.free_values.len()
    }

    #[inline]
    pub fn kernel_row(&self, i: usize) -> &[f64] {
        let n = self.grid_len();
        &self.kernel_matrix[i * n..(i + 1) * n]
    }

    #[inline]
    pub fn kernel_value(&self, i: usize, j: usize) -> f64 {
        self.kernel_matrix[i * self.grid_len() + j]
    }

    pub fn free_values(&self) -> &[f64] {
        &self.free_values
    }

    pub fn free_grid(&self) -> GridFunction {
        GridFunction::new(self.domain.clone(), self.free_values.clone())
            .expect("free term validated at construction")
    }

    /// Grid max of `|f|`.
    pub fn free_norm(&self) -> f64 {
        self.free_values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Sup-norm error bound of the depth-`m` truncation:
    /// `|f| * rho^(m+1) / (1 - rho)`.
    pub fn truncation_bound(&self, depth: usize) -> f64 {
        self.free_norm() * self.rho.powi(depth as i32 + 1) / (1.0 - self.rho)
    }

    /// L2(mu) distance between the kernel slices at two grid points:
    /// the square root of the grid average of `(K(t1,.) - K(t2,.))^2`.
    pub fn kernel_distance(&self, a: usize, b: usize) -> f64 {
        let (ra, rb) = (self.kernel_row(a), self.kernel_row(b));
        let mut acc = 0.0;
        for (x, y) in ra.iter().zip(rb) {
            let d = x - y;
            acc += d * d;
        }
        (acc / self.grid_len() as f64).sqrt()
    }

    /// Least-squares fit of `log kernel_distance` against `log |t1 - t2|`
    /// over all grid pairs with positive distance. Purely diagnostic.
    pub fn holder_diagnostic(&self) -> Result<HolderDiagnostic> {
        let g = self.domain.grid_per_axis();
        if g < 8 {
            return Err(Error::GridTooCoarse { needed: 8, got: g });
        }
        let n = self.grid_len();
        let tol = 1e-12 * self.rho_bar.max(1.0);
        let samples: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .flat_map_iter(|a| {
                (a + 1..n).filter_map(move |b| {
                    let dk = self.kernel_distance(a, b);
                    if dk > tol {
                        Some((self.domain.euclid_distance(a, b).ln(), dk.ln()))
                    } else {
                        None
                    }
                })
            })
            .collect();
        if samples.is_empty() {
            return Ok(HolderDiagnostic {
                alpha: 0.0,
                constant: 0.0,
                degenerate: true,
            });
        }
        let m = samples.len() as f64;
        let (sx, sy) = samples
            .iter()
            .fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
        let (mx, my) = (sx / m, sy / m);
        let (sxx, sxy) = samples.iter().fold((0.0, 0.0), |(sxx, sxy), (x, y)| {
            (sxx + (x - mx) * (x - mx), sxy + (x - mx) * (y - my))
        });
        let alpha = sxy / sxx;
        let constant = (my - alpha * mx).exp();
        Ok(HolderDiagnostic {
            alpha,
            constant,
            degenerate: false,
        })
    }
}

fn validate_kernel_params(kernel: &Kernel, grid_len: usize) -> Result<()> {
    match kernel {
        Kernel::Constant { lambda } | Kernel::Separable { lambda } => {
            if !lambda.is_finite() {
                return Err(Error::NonFiniteValue { what: "kernel" });
            }
        }
        Kernel::GaussianSmooth { lambda, width } => {
            if !lambda.is_finite() || !width.is_finite() {
                return Err(Error::NonFiniteValue { what: "kernel" });
            }
            if *width <= 0.0 {
                return Err(Error::InvalidParam("kernel width must be positive".into()));
            }
        }
        Kernel::Tabulated { values } => {
            if values.len() != grid_len * grid_len {
                return Err(Error::DomainMismatch);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_domain(g: usize) -> Domain {
        Domain::new(1, g).unwrap()
    }

    fn problem(g: usize, kernel: Kernel, free: FreeTerm) -> FredholmProblem {
        FredholmProblem::new(unit_domain(g), kernel, free).unwrap()
    }

    /// Grid average of s^k, the quadrature oracle for the moment integrals.
    fn grid_moment(g: usize, k: u32) -> f64 {
        let d = unit_domain(g);
        (0..g).map(|i| d.point(i)[0].powi(k as i32)).sum::<f64>() / g as f64
    }

    #[test]
    fn rho_of_constant_kernel() {
        let p = problem(64, Kernel::Constant { lambda: 0.5 }, FreeTerm::One);
        assert_eq!(p.rho(), 0.5);
        assert_eq!(p.rho_bar(), 0.5);
        let z = problem(64, Kernel::Constant { lambda: 0.0 }, FreeTerm::One);
        assert_eq!(z.rho(), 0.0);
    }

    #[test]
    fn rho_of_separable_kernel_matches_moment_integral() {
        let g = 64;
        let p = problem(g, Kernel::Separable { lambda: 1.0 }, FreeTerm::Identity);
        // max_t t * avg(s) with avg(s) = 1/2 exactly on the symmetric lattice.
        assert!((p.rho() - 0.5).abs() <= 1.0 / g as f64);
        assert!((p.rho() - grid_moment(g, 1)).abs() < 1e-12);
    }

    #[test]
    fn rho2_and_beta_examples() {
        let p = problem(64, Kernel::Constant { lambda: 0.5 }, FreeTerm::One);
        assert!((p.rho2() - 0.25).abs() < 1e-15);
        assert!((p.beta() - 0.25).abs() < 1e-15);
        let z = problem(64, Kernel::Constant { lambda: 0.0 }, FreeTerm::One);
        assert_eq!(z.rho2(), 0.0);
        assert_eq!(z.beta(), 0.0);

        let g = 64;
        let s = problem(g, Kernel::Separable { lambda: 1.0 }, FreeTerm::Identity);
        let m2 = grid_moment(g, 2);
        assert!((s.rho2() - 1.0 / 3.0).abs() <= 2.0 / g as f64);
        assert!((s.rho2() - m2).abs() < 1e-12);
        assert!((s.beta() - 1.0 / 3.0).abs() <= 2.0 / g as f64);
        assert!((s.beta() - m2).abs() < 1e-12);
    }

    #[test]
    fn contraction_violation_is_a_hard_error() {
        let err = FredholmProblem::new(
            unit_domain(16),
            Kernel::Constant { lambda: 1.2 },
            FreeTerm::One,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ContractionViolated { .. }));
    }

    #[test]
    fn zero_free_term_is_rejected() {
        let err = FredholmProblem::new(
            unit_domain(16),
            Kernel::Constant { lambda: 0.5 },
            FreeTerm::Tabulated {
                values: vec![0.0; 16],
            },
        )
        .unwrap_err();
        assert_eq!(err, Error::ZeroFreeTerm);
    }

    #[test]
    fn non_finite_tabulated_kernel_is_rejected() {
        let mut values = vec![0.1; 16 * 16];
        values[5] = f64::NAN;
        let err =
            FredholmProblem::new(unit_domain(16), Kernel::Tabulated { values }, FreeTerm::One)
                .unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { .. }));
    }

    #[test]
    fn kernel_distance_trivial_cases() {
        let p = problem(32, Kernel::Constant { lambda: 0.7 }, FreeTerm::One);
        assert_eq!(p.kernel_distance(3, 3), 0.0);
        assert_eq!(p.kernel_distance(0, 31), 0.0);
    }

    #[test]
    fn kernel_distance_separable_endpoints() {
        let g = 128;
        let p = problem(g, Kernel::Separable { lambda: 1.0 }, FreeTerm::Identity);
        // d(0, 1) = sqrt(avg s^2), close to 1/sqrt(3).
        let want = grid_moment(g, 2).sqrt();
        let got = p.kernel_distance(0, g - 1);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 1.0 / 3.0_f64.sqrt()).abs() < 3.0 / g as f64);
    }

    #[test]
    fn holder_diagnostic_degenerate_for_constant_kernel() {
        let p = problem(16, Kernel::Constant { lambda: 0.5 }, FreeTerm::One);
        assert!(p.holder_diagnostic().unwrap().degenerate);
    }

    #[test]
    fn holder_diagnostic_recovers_linear_exponent() {
        let p = problem(32, Kernel::Separable { lambda: 1.0 }, FreeTerm::Identity);
        let h = p.holder_diagnostic().unwrap();
        assert!(!h.degenerate);
        assert!((h.alpha - 1.0).abs() < 0.05, "alpha {}", h.alpha);
    }

    #[test]
    fn holder_diagnostic_gaussian_kernel_is_lipschitz_like() {
        let p = problem(
            32,
            Kernel::GaussianSmooth {
                lambda: 1.0,
                width: 1.0,
            },
            FreeTerm::One,
        );
        let h = p.holder_diagnostic().unwrap();
        assert!(!h.degenerate);
        assert!(h.alpha > 0.0 && h.alpha <= 1.0, "alpha {}", h.alpha);
        assert!(h.constant.is_finite() && h.constant > 0.0);
    }

    #[test]
    fn holder_diagnostic_needs_enough_grid() {
        let p = problem(4, Kernel::Separable { lambda: 1.0 }, FreeTerm::One);
        assert!(matches!(
            p.holder_diagnostic(),
            Err(Error::GridTooCoarse { .. })
        ));
    }

    #[test]
    fn tabulated_kernel_interpolation_matches_nodes_and_is_bounded() {
        let g = 8;
        let d = unit_domain(g);
        let sep = Kernel::Separable { lambda: 0.9 };
        let mut values = vec![0.0; g * g];
        for i in 0..g {
            for j in 0..g {
                values[i * g + j] = sep.eval(&d, &d.point(i), &d.point(j));
            }
        }
        let tab = Kernel::Tabulated {
            values: values.clone(),
        };
        let bound = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for i in 0..g {
            for j in 0..g {
                let k = tab.eval(&d, &d.point(i), &d.point(j));
                assert!((k - values[i * g + j]).abs() < 1e-15);
            }
        }
        // Off-grid values stay bounded by the table.
        for a in 0..20 {
            for b in 0..20 {
                let t = [a as f64 / 19.0];
                let s = [b as f64 / 19.0];
                assert!(tab.eval(&d, &t, &s).abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn refining_the_grid_moves_constants_by_vanishing_amounts() {
        for kernel in [
            Kernel::Separable { lambda: 1.0 },
            Kernel::GaussianSmooth {
                lambda: 0.8,
                width: 0.5,
            },
        ] {
            let consts: Vec<(f64, f64, f64)> = [8usize, 16, 32, 64, 128]
                .iter()
                .map(|&g| {
                    let p = problem(g, kernel.clone(), FreeTerm::One);
                    (p.rho(), p.rho2(), p.beta())
                })
                .collect();
            let diffs: Vec<(f64, f64, f64)> = consts
                .windows(2)
                .map(|w| {
                    (
                        (w[0].0 - w[1].0).abs(),
                        (w[0].1 - w[1].1).abs(),
                        (w[0].2 - w[1].2).abs(),
                    )
                })
                .collect();
            for pair in diffs.windows(2) {
                assert!(pair[1].0 <= pair[0].0 + 1e-12);
                assert!(pair[1].1 <= pair[0].1 + 1e-12);
                assert!(pair[1].2 <= pair[0].2 + 1e-12);
            }
        }
    }
}
