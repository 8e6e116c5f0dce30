//! Evaluation grid over the unit cube and functions sampled on it.
//!
//! The domain is the regular lattice of `G^dim` points of `[0,1]^dim`
//! (boundaries included), carrying the uniform probability measure that puts
//! mass `1/G^dim` on every lattice point. Integrals are therefore plain grid
//! averages, and the Monte Carlo samplers draw lattice points from the same
//! measure, so quadrature constants are exact expectations of the samplers.

use std::io::{self, Write};

use crate::error::{Error, Result};

/// Probability measure tag carried by a domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    /// Equal mass on every lattice point; total mass one.
    UniformGrid,
}

/// The unit cube `[0,1]^dim` discretized by `G` points per axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Domain {
    dim: usize,
    grid_per_axis: usize,
    measure: Measure,
}

/// Hard cap on the number of lattice points of a domain.
pub const MAX_GRID_LEN: usize = 1 << 22;

impl Domain {
    pub fn new(dim: usize, grid_per_axis: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParam("domain dimension must be >= 1".into()));
        }
        if grid_per_axis < 2 {
            return Err(Error::InvalidParam(
                "grid must have at least 2 points per axis".into(),
            ));
        }
        let mut len: usize = 1;
        for _ in 0..dim {
            len = len
                .checked_mul(grid_per_axis)
                .filter(|&l| l <= MAX_GRID_LEN)
                .ok_or_else(|| {
                    Error::InvalidParam(format!(
                        "grid of {grid_per_axis}^{dim} points is too large"
                    ))
                })?;
        }
        Ok(Domain {
            dim,
            grid_per_axis,
            measure: Measure::UniformGrid,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid_per_axis(&self) -> usize {
        self.grid_per_axis
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    /// Total number of lattice points, `G^dim`.
    pub fn grid_len(&self) -> usize {
        self.grid_per_axis.pow(self.dim as u32)
    }

    /// Coordinates of the lattice point with flat index `flat`.
    ///
    /// Axis 0 varies fastest; each axis coordinate is `i / (G - 1)`.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        debug_assert!(flat < self.grid_len());
        let g = self.grid_per_axis;
        let step = 1.0 / (g - 1) as f64;
        let mut rest = flat;
        (0..self.dim)
            .map(|_| {
                let digit = rest % g;
                rest /= g;
                digit as f64 * step
            })
            .collect()
    }

    /// Euclidean distance between two lattice points.
    pub fn euclid_distance(&self, a: usize, b: usize) -> f64 {
        let (pa, pb) = (self.point(a), self.point(b));
        pa.iter()
            .zip(&pb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

/// Real values of a function on the lattice of its domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    domain: Domain,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(domain: Domain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.grid_len() {
            return Err(Error::DomainMismatch);
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue {
                what: "grid function",
            });
        }
        Ok(GridFunction { domain, values })
    }

    pub fn constant(domain: Domain, value: f64) -> Self {
        let n = domain.grid_len();
        GridFunction {
            domain,
            values: vec![value; n],
        }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Grid max of the absolute value (the computable sup norm).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Grid max of the absolute difference between two functions.
    pub fn sup_distance(&self, other: &GridFunction) -> Result<f64> {
        if self.domain != other.domain {
            return Err(Error::DomainMismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    /// One row per lattice point: the grid coordinates, then the value.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        for a in 0..self.domain.dim() {
            write!(w, "t{},", a + 1)?;
        }
        writeln!(w, "value")?;
        for (i, v) in self.values.iter().enumerate() {
            for c in self.domain.point(i) {
                write!(w, "{c},")?;
            }
            writeln!(w, "{v}")?;
        }
        Ok(())
    }
}
