//! The log-joint likelihood as a function of the random effects at fixed θ.

use crate::ar1::Ar1Precision;
use crate::error::{Error, Result};
use crate::model::{
    eta_unchecked, log_re_density_unchecked, Dataset, ModelSpec, ObsKernel, ParameterVector,
    RandomEffectVector, ReLayout,
};
use crate::remat::ReBlockMatrix;

/// `Ψ ↦ l_j(y, θ, Ψ)` with analytic gradient and Hessian.
pub(crate) struct JointObjective<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub theta: &'a ParameterVector,
    pub kernel: ObsKernel,
    pub layout: ReLayout,
    /// Σ_i log_norm(y_i), constant in Ψ.
    norm_sum: f64,
}

impl<'a> JointObjective<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a Dataset, theta: &'a ParameterVector) -> Result<Self> {
        theta.validate(spec)?;
        let kernel = ObsKernel::new(spec, theta)?;
        let mut norm_sum = 0.0;
        for (i, o) in data.observations.iter().enumerate() {
            let v = kernel.log_norm(o.y)?;
            if !v.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            norm_sum += v;
        }
        Ok(Self {
            spec,
            data,
            theta,
            kernel,
            layout: spec.re_layout(),
            norm_sum,
        })
    }

    pub fn psi_from_flat(&self, flat: &[f64]) -> RandomEffectVector {
        RandomEffectVector::from_flat(self.layout, flat).expect("layout length")
    }

    /// Conditional log-likelihood for the responses held by this objective.
    pub fn cond_loglik(&self, psi: &RandomEffectVector) -> f64 {
        self.norm_sum
            + self
                .data
                .observations
                .iter()
                .map(|o| self.kernel.eta_part(o.y, eta_unchecked(self.theta, psi, o.t, o.a)))
                .sum::<f64>()
    }

    pub fn value(&self, psi: &RandomEffectVector) -> f64 {
        self.cond_loglik(psi) + log_re_density_unchecked(self.theta.rho(), psi)
    }

    /// Per-cell sums of the first and second `η`-derivatives.
    fn cell_derivs(&self, psi: &RandomEffectVector) -> (Vec<f64>, Vec<f64>) {
        let a = self.spec.n_ages;
        let mut d1 = vec![0.0; self.spec.n_years * a];
        let mut d2 = vec![0.0; self.spec.n_years * a];
        for o in &self.data.observations {
            let (g, h) = self
                .kernel
                .eta_derivs(o.y, eta_unchecked(self.theta, psi, o.t, o.a));
            d1[o.t * a + o.a] += g;
            d2[o.t * a + o.a] += h;
        }
        (d1, d2)
    }

    /// Gradient and negated Hessian `-∂²l_j/∂Ψ∂Ψᵀ`.
    pub fn grad_and_curvature(&self, psi: &RandomEffectVector) -> (Vec<f64>, ReBlockMatrix) {
        let layout = self.layout;
        let mut curv = ReBlockMatrix::prior_precision(layout, self.theta.rho());
        let mut grad = self.prior_grad(psi);
        if layout.is_empty() {
            return (grad, curv);
        }
        let (d1, d2) = self.cell_derivs(psi);
        let (s, d) = (self.theta.sigma(), self.theta.delta());
        let a = layout.n_ages;
        let t_years = layout.n_re_years();
        for t in 0..t_years {
            for k in t * a..(t + 1) * a {
                grad[t] += s * d1[k];
                grad[t_years + k] += d * d1[k];
                let w = -d2[k];
                curv.year_diag[t] += s * s * w;
                curv.inter_diag[k] += d * d * w;
                curv.coupling[k] += s * d * w;
            }
        }
        (grad, curv)
    }

    pub fn gradient(&self, psi: &RandomEffectVector) -> Vec<f64> {
        let mut grad = self.prior_grad(psi);
        if self.layout.is_empty() {
            return grad;
        }
        let (d1, _) = self.cell_derivs(psi);
        let (s, d) = (self.theta.sigma(), self.theta.delta());
        let a = self.layout.n_ages;
        let t_years = self.layout.n_re_years();
        for t in 0..t_years {
            for k in t * a..(t + 1) * a {
                grad[t] += s * d1[k];
                grad[t_years + k] += d * d1[k];
            }
        }
        grad
    }

    fn prior_grad(&self, psi: &RandomEffectVector) -> Vec<f64> {
        let t_years = self.layout.n_re_years();
        if t_years == 0 {
            return Vec::new();
        }
        let ar = Ar1Precision::new(t_years, self.theta.rho());
        let mut g: Vec<f64> = ar.mul_vec(&psi.year_effects).iter().map(|v| -v).collect();
        g.extend(psi.interaction_effects.iter().map(|v| -v));
        g
    }
}
