//! Small dense symmetric-matrix helpers: storage, a positive-semidefinite
//! Cholesky factorization with zero-pivot handling, and a power iteration for
//! the largest eigenvalue.

use crate::error::{Error, Result};

/// Dense square matrix, row major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_data(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::InvalidParam(format!(
                "matrix data length {} does not match {n}x{n}",
                data.len()
            )));
        }
        Ok(SquareMatrix { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.n).fold(0.0_f64, |m, i| m.max(self.get(i, i)))
    }

    pub fn add_diagonal(&mut self, jitter: f64) {
        for i in 0..self.n {
            let v = self.get(i, i) + jitter;
            self.set(i, i, v);
        }
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if (self.get(i, j) - self.get(j, i)).abs() > rel_tol * scale.max(1e-300) {
                    return false;
                }
            }
        }
        true
    }

    /// Largest eigenvalue of a symmetric matrix by power iteration from the
    /// all-ones vector. Deterministic; adequate for diagnostics.
    pub fn max_eigenvalue(&self, iterations: usize) -> f64 {
        let n = self.n;
        if n == 0 {
            return 0.0;
        }
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        let mut w = vec![0.0; n];
        for _ in 0..iterations {
            for (i, slot) in w.iter_mut().enumerate() {
                let row = &self.data[i * n..(i + 1) * n];
                *slot = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / norm;
            }
        }
        lambda
    }
}

/// Lower-triangular Cholesky-type factor with `L L^T ~= A`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    data: Vec<f64>,
}

impl CholeskyFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// `out = L z`, turning iid standard normals into a correlated draw.
    pub fn mul_vec(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        for (i, slot) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.n..i * self.n + i + 1];
            *slot = row.iter().zip(z).map(|(a, b)| a * b).sum();
        }
    }
}

/// Cholesky factorization accepting positive semidefinite input.
///
/// Pivots within a small negative tolerance of zero produce a zero column
/// (valid for semidefinite matrices); pivots below the tolerance fail.
pub fn cholesky_psd(a: &SquareMatrix) -> Result<CholeskyFactor> {
    let n = a.n();
    let scale = a.max_diagonal().max(f64::MIN_POSITIVE);
    let neg_tol = scale * 1e-10;
    let zero_tol = scale * 1e-14;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d > zero_tol {
            let root = d.sqrt();
            l[j * n + j] = root;
            for i in (j + 1)..n {
                let mut v = a.get(i, j);
                for k in 0..j {
                    v -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = v / root;
            }
        } else if d >= -neg_tol {
            // Semidefinite direction: zero pivot, zero column.
            l[j * n + j] = 0.0;
        } else {
            return Err(Error::FactorizationFailed);
        }
    }
    Ok(CholeskyFactor { n, data: l })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factors_positive_definite_matrix() {
        let a = SquareMatrix::from_data(2, vec![4.0, 2.0, 2.0, 3.0]).unwrap();
        let l = cholesky_psd(&a).unwrap();
        assert!((l.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((l.get(1, 0) - 1.0).abs() < 1e-15);
        assert!((l.get(1, 1) - 2.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn factors_zero_and_rank_deficient_matrices() {
        let z = SquareMatrix::zeros(3);
        let l = cholesky_psd(&z).unwrap();
        assert!(l.data.iter().all(|&v| v == 0.0));

        // Rank one: g g^T for g = (1, 2, 3).
        let g = [1.0, 2.0, 3.0];
        let mut a = SquareMatrix::zeros(3);
        for i in 0..3 {
            for j in 0..3 {
                a.set(i, j, g[i] * g[j]);
            }
        }
        let l = cholesky_psd(&a).unwrap();
        let mut z = [0.0; 3];
        l.mul_vec(&[1.0, 0.0, 0.0], &mut z);
        for i in 0..3 {
            assert!((z[i] - g[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_clearly_indefinite_matrix() {
        let a = SquareMatrix::from_data(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(cholesky_psd(&a).is_err());
    }

    #[test]
    fn power_iteration_finds_dominant_eigenvalue() {
        let a = SquareMatrix::from_data(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let l = a.max_eigenvalue(100);
        assert!((l - 3.0).abs() < 1e-9, "lambda {l}");
    }
}
