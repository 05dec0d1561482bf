#![allow(dead_code)]

use caic_core::ar1::Ar1Precision;
use caic_core::model::{Dataset, ModelSpec, ParameterVector};
use caic_core::simulation::{draw_random_effects, simulate_dataset};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Dense linear-mixed-model quantities for the Gaussian identity model.
pub struct DenseGaussian {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl DenseGaussian {
    pub fn new(spec: &ModelSpec, theta: &ParameterVector, data: &Dataset) -> Self {
        let n = data.len();
        let layout = spec.re_layout();
        let t_years = layout.n_re_years();
        let q = layout.len();
        let mut x = DMatrix::zeros(n, spec.n_ages);
        let mut z = DMatrix::zeros(n, q);
        for (i, o) in data.observations.iter().enumerate() {
            x[(i, o.a)] = 1.0;
            if q > 0 {
                z[(i, o.t)] = theta.sigma();
                z[(i, t_years + o.t * spec.n_ages + o.a)] = theta.delta();
            }
        }
        let mut g = DMatrix::identity(q, q);
        if q > 0 {
            let cov = Ar1Precision::new(t_years, theta.rho()).covariance();
            g.view_mut((0, 0), (t_years, t_years)).copy_from(&cov);
        }
        let se2 = theta.dispersion().powi(2);
        let v = &z * &g * z.transpose() + DMatrix::identity(n, n) * se2;
        let y = DVector::from_vec(data.responses());
        Self { x, z, g, v, y }
    }

    pub fn log_marginal(&self, q: &[f64]) -> f64 {
        let n = self.y.len() as f64;
        let r = &self.y - &self.x * DVector::from_row_slice(q);
        let chol = self.v.clone().cholesky().unwrap();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = r.dot(&chol.solve(&r));
        -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad
    }

    /// Posterior mean of Ψ given q.
    pub fn posterior_mean(&self, q: &[f64]) -> DVector<f64> {
        let r = &self.y - &self.x * DVector::from_row_slice(q);
        let vinv = self.v.clone().try_inverse().unwrap();
        &self.g * self.z.transpose() * vinv * r
    }

    /// GLS estimate of q.
    pub fn gls(&self) -> DVector<f64> {
        let vinv = self.v.clone().try_inverse().unwrap();
        let xtv = self.x.transpose() * &vinv;
        (&xtv * &self.x).try_inverse().unwrap() * xtv * &self.y
    }

    /// Hat matrix of the fitted conditional mean with variance components fixed.
    pub fn hat(&self) -> DMatrix<f64> {
        let n = self.y.len();
        let vinv = self.v.clone().try_inverse().unwrap();
        let xtv = self.x.transpose() * &vinv;
        let p = &self.x * (&xtv * &self.x).try_inverse().unwrap() * xtv;
        let zgz = &self.z * &self.g * self.z.transpose();
        &p + &zgz * &vinv * (DMatrix::identity(n, n) - &p)
    }

    /// `A + tr(Z G Zᵀ V⁻¹)`, half the precision-trace penalty with only q estimated.
    pub fn method2_half_penalty(&self) -> f64 {
        let vinv = self.v.clone().try_inverse().unwrap();
        self.x.ncols() as f64 + (&self.z * &self.g * self.z.transpose() * vinv).trace()
    }
}

pub fn simulate(spec: &ModelSpec, theta: &ParameterVector, seed: u64) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let psi = draw_random_effects(spec, theta, &mut rng);
    simulate_dataset(spec, theta, &psi, &mut rng).unwrap()
}

pub fn design_q(a: usize) -> Vec<f64> {
    (0..a).map(|i| i as f64 - 2.0).collect()
}
