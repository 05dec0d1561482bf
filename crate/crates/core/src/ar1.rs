//! Stationary AR(1) process with unit marginal variance.
//!
//! The precision matrix of `T` consecutive values is tridiagonal:
//!
//! ```text
//! Q = 1/(1-ρ²) · | 1   -ρ                 |
//!                | -ρ  1+ρ²  -ρ           |
//!                |      ...   ...   ...   |
//!                |            -ρ     1    |
//! ```
//!
//! and `log|Q| = -(T-1)·log(1-ρ²)`.

use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Precision {
    pub len: usize,
    pub rho: f64,
}

impl Ar1Precision {
    pub fn new(len: usize, rho: f64) -> Self {
        debug_assert!(rho.abs() < 1.0);
        Self { len, rho }
    }

    fn scale(&self) -> f64 {
        1.0 / (1.0 - self.rho * self.rho)
    }

    pub fn diag(&self, i: usize) -> f64 {
        if self.len == 1 {
            return 1.0;
        }
        let inner = if i == 0 || i + 1 == self.len {
            1.0
        } else {
            1.0 + self.rho * self.rho
        };
        inner * self.scale()
    }

    /// Entry `(i, i+1)`.
    pub fn off_diag(&self) -> f64 {
        -self.rho * self.scale()
    }

    pub fn log_det(&self) -> f64 {
        -((self.len.saturating_sub(1)) as f64) * (1.0 - self.rho * self.rho).ln()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len;
        let off = self.off_diag();
        (0..n)
            .map(|i| {
                let mut v = self.diag(i) * x[i];
                if i > 0 {
                    v += off * x[i - 1];
                }
                if i + 1 < n {
                    v += off * x[i + 1];
                }
                v
            })
            .collect()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag(i);
            if i + 1 < n {
                m[(i, i + 1)] = self.off_diag();
                m[(i + 1, i)] = self.off_diag();
            }
        }
        m
    }

    /// Dense stationary covariance, `Σ_ij = ρ^|i-j|`.
    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len, self.len, |i, j| {
            self.rho.powi((i as i32 - j as i32).abs())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_inverts_covariance() {
        for &rho in &[0.0, 0.3, -0.6, 0.8, 0.95] {
            for n in 1..8 {
                let p = Ar1Precision::new(n, rho);
                let prod = p.to_dense() * p.covariance();
                let err = (prod - DMatrix::identity(n, n)).abs().max();
                assert!(err < 1e-10, "rho={rho} n={n} err={err}");
            }
        }
    }

    #[test]
    fn log_det_matches_dense_cholesky() {
        for &rho in &[0.0, 0.5, 0.8, -0.9] {
            for n in 1..=10 {
                let p = Ar1Precision::new(n, rho);
                let chol = p.to_dense().cholesky().unwrap();
                let dense: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                assert!((dense - p.log_det()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quad_form_matches_dense() {
        let p = Ar1Precision::new(5, 0.7);
        let x = [0.3, -1.2, 0.5, 2.0, -0.1];
        let v = nalgebra::DVector::from_row_slice(&x);
        let dense = (v.transpose() * p.to_dense() * &v)[(0, 0)];
        assert!((dense - p.quad_form(&x)).abs() < 1e-12);
    }
}
