//! Uniform-norm confidence bands: an asymptotic band from the simulated
//! supremum of a Gaussian field with empirically estimated covariance, and a
//! non-asymptotic band from a calibrated subgaussian tail constant.

use rayon::prelude::*;

use crate::dtm::{Allocation, SolutionEstimate};
use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::linalg::{cholesky_psd, CholeskyFactor, SquareMatrix};
use crate::problem::FredholmProblem;
use crate::recursive::recursive_solve;
use crate::reference::neumann_iterate;
use crate::rng::{derived_seed, scope, Stream};

/// Where a covariance matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceSource {
    /// Sample covariance of independent estimator replicates.
    Empirical { replicates: usize },
    /// Surface produced by the covariance recursion.
    Theoretical,
}

/// Symmetric covariance on grid x grid, ready for factorization.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    matrix: SquareMatrix,
    source: CovarianceSource,
    jitter: f64,
}

/// Relative size of the diagonal jitter added before factorization.
const JITTER_REL: f64 = 1e-10;
/// Attempts of the escalating jitter retry (each multiplies by 10).
const JITTER_RETRIES: usize = 3;

impl CovarianceEstimate {
    fn with_jitter(mut matrix: SquareMatrix, source: CovarianceSource) -> Self {
        let jitter = JITTER_REL * matrix.max_diagonal();
        matrix.add_diagonal(jitter);
        CovarianceEstimate {
            matrix,
            source,
            jitter,
        }
    }

    /// Wraps a surface from the covariance recursion under the same jitter
    /// policy as the empirical route.
    pub fn theoretical(matrix: SquareMatrix) -> Self {
        Self::with_jitter(matrix, CovarianceSource::Theoretical)
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.matrix
    }

    pub fn source(&self) -> CovarianceSource {
        self.source
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn factor(&self) -> Result<CholeskyFactor> {
        if let Ok(f) = cholesky_psd(&self.matrix) {
            return Ok(f);
        }
        let base = JITTER_REL * self.matrix.max_diagonal().max(f64::MIN_POSITIVE);
        let mut extra = base;
        for _ in 0..JITTER_RETRIES {
            extra *= 10.0;
            let mut shifted = self.matrix.clone();
            shifted.add_diagonal(extra);
            if let Ok(f) = cholesky_psd(&shifted) {
                return Ok(f);
            }
        }
        Err(Error::FactorizationFailed)
    }
}

/// Sample covariance of replicate grid functions, centered at the replicate
/// mean and multiplied by `scale` (the squared band normalization).
pub fn empirical_covariance(
    replicates: &[&GridFunction],
    scale: f64,
) -> Result<CovarianceEstimate> {
    let r = replicates.len();
    if r < 2 {
        return Err(Error::TooFewReplicates { got: r });
    }
    let domain = replicates[0].domain();
    if replicates.iter().any(|g| g.domain() != domain) {
        return Err(Error::DomainMismatch);
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParam("scale must be positive".into()));
    }
    let n = domain.grid_len();
    let inv_r = 1.0 / r as f64;
    let mut mean = vec![0.0; n];
    for g in replicates {
        for (m, v) in mean.iter_mut().zip(g.values()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m *= inv_r;
    }
    let devs: Vec<Vec<f64>> = replicates
        .iter()
        .map(|g| g.values().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, slot) in row.iter_mut().enumerate().skip(i) {
            let mut acc = 0.0;
            for dev in &devs {
                acc += dev[i] * dev[j];
            }
            *slot = acc * inv_r * scale;
        }
    });
    for i in 0..n {
        for j in 0..i {
            data[i * n + j] = data[j * n + i];
        }
    }
    let matrix = SquareMatrix::from_data(n, data)?;
    Ok(CovarianceEstimate::with_jitter(
        matrix,
        CovarianceSource::Empirical { replicates: r },
    ))
}

/// Empirical `level`-quantile of `max_t |G(t)|` over `sims` draws of a
/// centered Gaussian vector with the given covariance.
pub fn gaussian_sup_quantile(
    cov: &CovarianceEstimate,
    level: f64,
    sims: u64,
    stream: Stream,
) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParam("level must lie in (0, 1)".into()));
    }
    if sims < 1000 {
        return Err(Error::InvalidParam(
            "need at least 1000 simulation draws".into(),
        ));
    }
    let factor = cov.factor()?;
    let n = factor.n();
    let mut maxima: Vec<f64> = (0..sims)
        .into_par_iter()
        .map(|k| {
            let mut z = vec![0.0; n];
            for (j, slot) in z.iter_mut().enumerate() {
                *slot = stream.standard_normal(k * n as u64 + j as u64);
            }
            let mut y = vec![0.0; n];
            factor.mul_vec(&z, &mut y);
            y.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
        })
        .collect();
    maxima.sort_unstable_by(f64::total_cmp);
    let rank = ((level * sims as f64).ceil() as usize).clamp(1, sims as usize);
    Ok(maxima[rank - 1])
}

/// Which kind of uniform-norm band was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandKind {
    AsymptoticClt,
    NonAsymptoticSubgaussian,
}

impl BandKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BandKind::AsymptoticClt => "asymptotic_clt",
            BandKind::NonAsymptoticSubgaussian => "subgaussian",
        }
    }
}

/// Per-grid-point envelopes around an estimate at a stated level.
#[derive(Debug, Clone)]
pub struct ConfidenceBand {
    pub level: f64,
    pub lower: GridFunction,
    pub upper: GridFunction,
    pub kind: BandKind,
    /// The quantile `u` the half width was derived from.
    pub half_width_scale: f64,
    /// The constant half width itself.
    pub half_width: f64,
}

impl ConfidenceBand {
    /// True when `target` lies inside the band at every grid point.
    pub fn contains(&self, target: &GridFunction) -> Result<bool> {
        if target.domain() != self.lower.domain() {
            return Err(Error::DomainMismatch);
        }
        Ok(target
            .values()
            .iter()
            .zip(self.lower.values().iter().zip(self.upper.values()))
            .all(|(v, (lo, hi))| lo <= v && v <= hi))
    }

    /// Widens the band by a constant margin (for example the truncation gap
    /// between the estimator's target and the full solution).
    pub fn inflate(&self, margin: f64) -> ConfidenceBand {
        assert!(margin >= 0.0);
        let widen = |g: &GridFunction, sign: f64| {
            let values: Vec<f64> = g.values().iter().map(|v| v + sign * margin).collect();
            GridFunction::new(g.domain().clone(), values).expect("finite band")
        };
        ConfidenceBand {
            level: self.level,
            lower: widen(&self.lower, -1.0),
            upper: widen(&self.upper, 1.0),
            kind: self.kind,
            half_width_scale: self.half_width_scale,
            half_width: self.half_width + margin,
        }
    }
}

/// Band normalization: the squared scaling is the final-stage count `n(M)`,
/// which equals half the budget under the halving allocation.
fn band_scale(alloc: &Allocation) -> f64 {
    alloc.last_count() as f64
}

fn centered_band(
    mean: &GridFunction,
    level: f64,
    kind: BandKind,
    quantile: f64,
    half_width: f64,
) -> ConfidenceBand {
    let lower: Vec<f64> = mean.values().iter().map(|v| v - half_width).collect();
    let upper: Vec<f64> = mean.values().iter().map(|v| v + half_width).collect();
    ConfidenceBand {
        level,
        lower: GridFunction::new(mean.domain().clone(), lower).expect("finite band"),
        upper: GridFunction::new(mean.domain().clone(), upper).expect("finite band"),
        kind,
        half_width_scale: quantile,
        half_width,
    }
}

/// Asymptotic band: the half width is the simulated sup-norm quantile of a
/// Gaussian field with the replicate covariance, divided by the band scale.
pub fn asymptotic_band(
    estimate: &SolutionEstimate,
    level: f64,
    sims: u64,
    stream: Stream,
) -> Result<ConfidenceBand> {
    let reps = estimate
        .replicates
        .as_ref()
        .ok_or(Error::TooFewReplicates { got: 1 })?;
    let scale = band_scale(&estimate.allocation);
    let refs: Vec<&GridFunction> = reps.iter().collect();
    let cov = empirical_covariance(&refs, scale)?;
    let quantile = gaussian_sup_quantile(&cov, level, sims, stream)?;
    let half_width = quantile / scale.sqrt();
    Ok(centered_band(
        &estimate.mean,
        level,
        BandKind::AsymptoticClt,
        quantile,
        half_width,
    ))
}

/// Non-asymptotic band from a subgaussian tail constant `c3`: inverting
/// `P(scaled sup error > u) <= exp(-c3 u^2)` at the requested level gives
/// `u = sqrt(ln(1/(1-level)) / c3)`. Valid at any budget; an infinite `c3`
/// (deterministic problem) yields a zero-width band.
pub fn subgaussian_band(
    estimate: &SolutionEstimate,
    level: f64,
    c3: f64,
) -> Result<ConfidenceBand> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParam("level must lie in (0, 1)".into()));
    }
    if c3.is_nan() || c3 <= 0.0 {
        return Err(Error::InvalidParam("tail constant must be positive".into()));
    }
    let scale = band_scale(&estimate.allocation);
    let u = if c3.is_infinite() {
        0.0
    } else {
        ((1.0 / (1.0 - level)).ln() / c3).sqrt()
    };
    let half_width = u / scale.sqrt();
    Ok(centered_band(
        &estimate.mean,
        level,
        BandKind::NonAsymptoticSubgaussian,
        u,
        half_width,
    ))
}

/// Largest tail constant whose survival bound dominates the empirical
/// survival function of the observations at every observed point.
///
/// Returns infinity when every observation is zero (deterministic problems).
pub fn fit_subgaussian_tail(normalized_sup_errors: &[f64]) -> f64 {
    let n = normalized_sup_errors.len();
    let mut sorted = normalized_sup_errors.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut best = f64::INFINITY;
    for (k, &u) in sorted.iter().enumerate() {
        if u <= 0.0 {
            continue;
        }
        // Strictly-greater count; duplicates collapse to the same constraint.
        let mut hi = k;
        while hi + 1 < n && sorted[hi + 1] == u {
            hi += 1;
        }
        let greater = n - hi - 1;
        if greater == 0 {
            continue;
        }
        let survival = greater as f64 / n as f64;
        best = best.min(-survival.ln() / (u * u));
    }
    best
}

/// Calibrates the subgaussian tail constant by pilot runs of the recursive
/// estimator against the deterministic oracle at the same depth.
pub fn calibrate_c3(
    problem: &FredholmProblem,
    alloc: &Allocation,
    pilot_trials: u64,
    seed: u64,
) -> Result<f64> {
    if pilot_trials < 100 {
        return Err(Error::InvalidParam(
            "tail calibration needs at least 100 pilot trials".into(),
        ));
    }
    let oracle = neumann_iterate(problem, alloc.depth()).truncated;
    let scale = band_scale(alloc).sqrt();
    let errors: Vec<f64> = (0..pilot_trials)
        .into_par_iter()
        .map(|i| {
            let pilot_seed = derived_seed(seed, scope::PILOT, i);
            let est = recursive_solve(problem, alloc, pilot_seed, 1);
            scale
                * est
                    .mean
                    .sup_distance(&oracle)
                    .expect("estimate lives on the problem grid")
        })
        .collect();
    Ok(fit_subgaussian_tail(&errors))
}
