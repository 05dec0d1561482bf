//! Symmetric matrices over the random-effect vector with the sparsity of
//! the year + year×age layout.
//!
//! Nonzeros are limited to the tridiagonal year block, the diagonal of the
//! interaction block, and one coupling entry between year `t` and each
//! interaction `(t, a)`. Eliminating the diagonal interaction block leaves
//! a tridiagonal Schur complement, so factorization and solves are O(q).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ar1::Ar1Precision;
use crate::error::{Error, Result};
use crate::model::ReLayout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReBlockMatrix {
    pub layout: ReLayout,
    /// Diagonal of the year block, length `T`.
    pub year_diag: Vec<f64>,
    /// Entries `(t, t+1)` of the year block, length `T-1`.
    pub year_off: Vec<f64>,
    /// Diagonal of the interaction block, row-major `T×A`.
    pub inter_diag: Vec<f64>,
    /// Entry between year `t` and interaction `(t, a)`, row-major `T×A`.
    pub coupling: Vec<f64>,
}

impl ReBlockMatrix {
    pub fn zeros(layout: ReLayout) -> Self {
        let t = layout.n_re_years();
        let ta = t * layout.n_ages;
        Self {
            layout,
            year_diag: vec![0.0; t],
            year_off: vec![0.0; t.saturating_sub(1)],
            inter_diag: vec![0.0; ta],
            coupling: vec![0.0; ta],
        }
    }

    /// Precision of the random-effect prior: AR(1) year block, identity interactions.
    pub fn prior_precision(layout: ReLayout, rho: f64) -> Self {
        let mut m = Self::zeros(layout);
        let t = layout.n_re_years();
        if t == 0 {
            return m;
        }
        let ar = Ar1Precision::new(t, rho);
        for i in 0..t {
            m.year_diag[i] = ar.diag(i);
        }
        m.year_off.iter_mut().for_each(|v| *v = ar.off_diag());
        m.inter_diag.iter_mut().for_each(|v| *v = 1.0);
        m
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn negated(&self) -> Self {
        let neg = |v: &Vec<f64>| v.iter().map(|x| -x).collect::<Vec<_>>();
        Self {
            layout: self.layout,
            year_diag: neg(&self.year_diag),
            year_off: neg(&self.year_off),
            inter_diag: neg(&self.inter_diag),
            coupling: neg(&self.coupling),
        }
    }

    pub fn add_to_diagonal(&mut self, shift: impl Fn(f64) -> f64) {
        self.year_diag.iter_mut().for_each(|d| *d += shift(*d));
        self.inter_diag.iter_mut().for_each(|d| *d += shift(*d));
    }

    pub fn max_abs_diag(&self) -> f64 {
        self.year_diag
            .iter()
            .chain(&self.inter_diag)
            .fold(0.0_f64, |m, d| m.max(d.abs()))
    }

    /// Whether `(i, j)` may hold a nonzero under this layout.
    pub fn is_structural(&self, i: usize, j: usize) -> bool {
        let t_years = self.layout.n_re_years();
        let a = self.layout.n_ages;
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        match (i < t_years, j < t_years) {
            (true, true) => j - i <= 1,
            (true, false) => (j - t_years) / a == i,
            (false, false) => i == j,
            (false, true) => unreachable!(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if !self.is_structural(i, j) {
            return 0.0;
        }
        let t_years = self.layout.n_re_years();
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if j < t_years {
            if i == j {
                self.year_diag[i]
            } else {
                self.year_off[i]
            }
        } else if i < t_years {
            self.coupling[j - t_years]
        } else {
            self.inter_diag[i - t_years]
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let t_years = self.layout.n_re_years();
        let a = self.layout.n_ages;
        let mut out = vec![0.0; self.dim()];
        for t in 0..t_years {
            out[t] += self.year_diag[t] * x[t];
            if t + 1 < t_years {
                out[t] += self.year_off[t] * x[t + 1];
                out[t + 1] += self.year_off[t] * x[t];
            }
            for k in t * a..(t + 1) * a {
                let idx = t_years + k;
                out[idx] += self.inter_diag[k] * x[idx] + self.coupling[k] * x[t];
                out[t] += self.coupling[k] * x[idx];
            }
        }
        out
    }

    /// Cholesky-type factorization; fails unless the matrix is positive definite.
    pub fn factor(&self) -> Result<ReFactor> {
        let t_years = self.layout.n_re_years();
        let a = self.layout.n_ages;
        if let Some(k) = self.inter_diag.iter().position(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::NotPositiveDefinite(format!(
                "interaction pivot {k} = {}",
                self.inter_diag[k]
            )));
        }
        let mut schur: Vec<f64> = (0..t_years)
            .map(|t| {
                let elim: f64 = (t * a..(t + 1) * a)
                    .map(|k| self.coupling[k] * self.coupling[k] / self.inter_diag[k])
                    .sum();
                self.year_diag[t] - elim
            })
            .collect();
        let mut lower = vec![0.0; t_years.saturating_sub(1)];
        for t in 0..t_years {
            if t > 0 {
                lower[t - 1] = self.year_off[t - 1] / schur[t - 1];
                schur[t] -= lower[t - 1] * self.year_off[t - 1];
            }
            if !(schur[t] > 0.0) || !schur[t].is_finite() {
                return Err(Error::NotPositiveDefinite(format!(
                    "year pivot {t} = {}",
                    schur[t]
                )));
            }
        }
        Ok(ReFactor {
            layout: self.layout,
            inter_diag: self.inter_diag.clone(),
            coupling: self.coupling.clone(),
            pivots: schur,
            lower,
        })
    }
}

/// Factor of a positive-definite [`ReBlockMatrix`], reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct ReFactor {
    layout: ReLayout,
    inter_diag: Vec<f64>,
    coupling: Vec<f64>,
    pivots: Vec<f64>,
    lower: Vec<f64>,
}

impl ReFactor {
    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn log_det(&self) -> f64 {
        self.inter_diag
            .iter()
            .chain(&self.pivots)
            .map(|d| d.ln())
            .sum()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let t_years = self.layout.n_re_years();
        let a = self.layout.n_ages;
        let mut x = b.to_vec();
        // fold the interaction block into the year right-hand side
        for t in 0..t_years {
            for k in t * a..(t + 1) * a {
                x[t] -= self.coupling[k] / self.inter_diag[k] * b[t_years + k];
            }
        }
        // tridiagonal LDLᵀ on the Schur complement
        for t in 1..t_years {
            x[t] -= self.lower[t - 1] * x[t - 1];
        }
        for t in 0..t_years {
            x[t] /= self.pivots[t];
        }
        for t in (0..t_years.saturating_sub(1)).rev() {
            x[t] -= self.lower[t] * x[t + 1];
        }
        for t in 0..t_years {
            for k in t * a..(t + 1) * a {
                x[t_years + k] = (b[t_years + k] - self.coupling[k] * x[t]) / self.inter_diag[k];
            }
        }
        x
    }

    /// `trace(M⁻¹ B)` for a structured `B`, one solve per column of `B`.
    pub fn trace_inv_times(&self, b: &ReBlockMatrix) -> f64 {
        let n = self.dim();
        let mut col = vec![0.0; n];
        let mut trace = 0.0;
        for j in 0..n {
            // column j of B, restricted to its structural nonzeros
            col.iter_mut().for_each(|v| *v = 0.0);
            let mut any = false;
            for i in self.layout.structural_neighbours(j) {
                col[i] = b.get(i, j);
                any |= col[i] != 0.0;
            }
            if !any {
                continue;
            }
            let x = self.solve(&col);
            trace += x[j];
        }
        trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_pd(layout: ReLayout, seed: u64) -> ReBlockMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = ReBlockMatrix::prior_precision(layout, 0.6);
        for v in m.coupling.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
        for v in m.inter_diag.iter_mut() {
            *v += rng.random_range(0.5..3.0);
        }
        for v in m.year_diag.iter_mut() {
            *v += rng.random_range(2.0..6.0);
        }
        m
    }

    #[test]
    fn solve_and_logdet_match_dense() {
        let layout = ReLayout::new(5, 3, true);
        let m = random_pd(layout, 7);
        let f = m.factor().unwrap();
        let dense = m.to_dense();
        let chol = dense.clone().cholesky().unwrap();
        let ld: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        assert!((ld - f.log_det()).abs() < 1e-10);

        let b: Vec<f64> = (0..m.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = f.solve(&b);
        let back = m.mul_vec(&x);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
        let dx = chol.solve(&nalgebra::DVector::from_row_slice(&b));
        for (u, v) in x.iter().zip(dx.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn trace_matches_dense() {
        let layout = ReLayout::new(6, 2, true);
        let m = random_pd(layout, 11);
        let prior = ReBlockMatrix::prior_precision(layout, 0.8);
        let f = m.factor().unwrap();
        let dense = m.to_dense().try_inverse().unwrap() * prior.to_dense();
        assert!((dense.trace() - f.trace_inv_times(&prior)).abs() < 1e-10);
    }

    #[test]
    fn mul_vec_matches_dense() {
        let layout = ReLayout::new(4, 3, true);
        let m = random_pd(layout, 3);
        let x: Vec<f64> = (0..m.dim()).map(|i| i as f64 - 3.0).collect();
        let dense = m.to_dense() * nalgebra::DVector::from_row_slice(&x);
        for (u, v) in m.mul_vec(&x).iter().zip(dense.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let layout = ReLayout::new(3, 1, true);
        let m = ReBlockMatrix::prior_precision(layout, 0.5).negated();
        assert!(matches!(m.factor(), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn empty_layout() {
        let layout = ReLayout::new(4, 2, false);
        let m = ReBlockMatrix::prior_precision(layout, 0.5);
        assert_eq!(m.dim(), 0);
        let f = m.factor().unwrap();
        assert_eq!(f.log_det(), 0.0);
        assert!(f.solve(&[]).is_empty());
    }
}
