//! Conditional AIC: the data-sensitivity penalty (Method 1, continuous
//! families), the random-effect precision trace penalty (Method 2, all
//! families), effective degrees of freedom and the optional small-sample
//! refinement.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::derivatives::{d_psi_dtheta, invert_theta_hessian, marginal_theta_hessian, EstimatorJacobians};
use crate::error::{Error, Result};
use crate::estimation::{inner_maximize_psi, FitOptions, FitResult};
use crate::model::{
    eta_unchecked, CondMoments, Dataset, ModelSpec, ObsKernel, ParamKind, ParameterVector, RandomEffectVector,
};
use crate::remat::ReBlockMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaicReport {
    /// `-2 l_c(θ̂, Ψ̂ | y)`.
    pub neg2_lc: f64,
    pub p_c: usize,
    pub q: usize,
    pub method1_penalty: Option<f64>,
    /// `trace{l̈_j⁻¹ l̈_r}`.
    pub method2_trace: f64,
    pub method2_penalty: f64,
    pub small_sample_term: Option<f64>,
    pub caic_method1: Option<f64>,
    pub caic_method2: f64,
    /// Violations of expected bounds, e.g. a trace outside `[0, q]`.
    pub diagnostics: Vec<String>,
}

impl CaicReport {
    pub fn with_method1(mut self, penalty: f64) -> Self {
        self.method1_penalty = Some(penalty);
        self.caic_method1 = Some(self.neg2_lc + penalty);
        self
    }
}

/// Method 2: `-2 l_c + 2 p_c + 2 q - 2 trace{l̈_j⁻¹ l̈_r}`.
pub fn caic_method2(fit: &FitResult, data: &Dataset) -> Result<CaicReport> {
    let spec = &fit.spec;
    let q = spec.q();
    let p_c = fit.n_conditional_params();
    let factor = fit.joint_hessian_psi.negated().factor()?;
    let prior = ReBlockMatrix::prior_precision(spec.re_layout(), fit.theta_hat.rho());
    let trace = factor.trace_inv_times(&prior);
    let mut diagnostics = Vec::new();
    if !(-1e-8..=q as f64 + 1e-8).contains(&trace) {
        diagnostics.push(format!("method 2 trace {trace} outside [0, {q}]"));
    }
    let neg2_lc = -2.0 * spec.log_cond_likelihood(&fit.theta_hat, &fit.psi_hat, data)?;
    let penalty = 2.0 * (p_c + q) as f64 - 2.0 * trace;
    Ok(CaicReport {
        neg2_lc,
        p_c,
        q,
        method1_penalty: None,
        method2_trace: trace,
        method2_penalty: penalty,
        small_sample_term: None,
        caic_method1: None,
        caic_method2: neg2_lc + penalty,
        diagnostics,
    })
}

/// `trace{l̈_j⁻¹ l̈_r}` at a given θ, with Ψ at its conditional mode.
pub fn method2_trace_at(
    spec: &ModelSpec,
    theta: &ParameterVector,
    data: &Dataset,
    options: &FitOptions,
) -> Result<f64> {
    let init = RandomEffectVector::zeros(spec.re_layout());
    let inner = inner_maximize_psi(spec, theta, data, &init, options)?;
    let prior = ReBlockMatrix::prior_precision(spec.re_layout(), theta.rho());
    Ok(inner.factor.trace_inv_times(&prior))
}

/// Method 1 penalty `2·Σ_i Var_i Σ_k (∂Θ̂_k/∂y_i)(∂²log f_i/∂Θ_k∂y_i)`, with the
/// second derivative evaluated at `y = mean` and the variances taken from `moments`.
pub fn method1_penalty(
    fit: &FitResult,
    data: &Dataset,
    jac: &EstimatorJacobians,
    moments: &CondMoments,
) -> Result<f64> {
    let spec = &fit.spec;
    if !spec.family.is_continuous() {
        return Err(Error::UnsupportedFamily(spec.family));
    }
    let theta = &fit.theta_hat;
    let psi = &fit.psi_hat;
    let kernel = ObsKernel::new(spec, theta)?;
    let layout = spec.re_layout();
    let params = spec.param_layout();
    let (s, d) = (theta.sigma(), theta.delta());
    let mut total = 0.0;
    for (i, o) in data.observations.iter().enumerate() {
        let eta = eta_unchecked(theta, psi, o.t, o.a);
        let y = moments.mean[i];
        let c = kernel.d2_eta_y(y, eta);
        let mut acc = 0.0;
        for j in 0..params.len() {
            let dij = match params.kind(j) {
                ParamKind::Q(a) if a == o.a => c,
                ParamKind::Q(_) | ParamKind::RhoRaw | ParamKind::Power => 0.0,
                ParamKind::LogSigma if layout.enabled => c * s * psi.year(o.t),
                ParamKind::LogDelta if layout.enabled => c * d * psi.interaction(o.t, o.a),
                ParamKind::LogSigma | ParamKind::LogDelta => 0.0,
                ParamKind::Dispersion => kernel.d2_logdisp_y(y, eta),
            };
            acc += jac.d_theta_dy[(i, j)] * dij;
        }
        if !layout.is_empty() {
            acc += jac.d_psi_dy[(i, layout.year_index(o.t))] * c * s;
            acc += jac.d_psi_dy[(i, layout.interaction_index(o.t, o.a))] * c * d;
        }
        total += moments.variance[i] * acc;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    Ok(2.0 * total)
}

/// Both methods, with Method 1 using the fitted conditional moments.
pub fn caic_method1(fit: &FitResult, data: &Dataset, jac: &EstimatorJacobians) -> Result<CaicReport> {
    let moments = fit.spec.cond_mean_cov(&fit.theta_hat, &fit.psi_hat, data)?;
    let penalty = method1_penalty(fit, data, jac, &moments)?;
    Ok(caic_method2(fit, data)?.with_method1(penalty))
}

/// `p_c + q - trace{l̈_j⁻¹ l̈_r}`.
pub fn effective_df(report: &CaicReport) -> f64 {
    (report.p_c + report.q) as f64 - report.method2_trace
}

/// `-2·trace{Σ_Ψ⁻¹ (∂Ψ̂/∂θᵀ) COV(θ̂) (∂Ψ̂ᵀ/∂θ)}` with `COV(θ̂)` the inverse observed
/// information of the marginal. Refused when an estimate sits at a boundary.
pub fn small_sample_term(fit: &FitResult, data: &Dataset) -> Result<f64> {
    if fit.at_boundary() {
        return Err(Error::Boundary(format!(
            "{:?} at the boundary: the inverse information is not a valid covariance",
            fit.boundary
        )));
    }
    let active = fit.free.clone();
    let spec = &fit.spec;
    let q = spec.q();
    if q == 0 || active.is_empty() {
        return Ok(0.0);
    }
    let hess = marginal_theta_hessian(fit, data, &active)?;
    let cov = -invert_theta_hessian(&hess)?;
    let g_rows = d_psi_dtheta(fit, data)?.select_rows(&active); // k × q
    let prior = ReBlockMatrix::prior_precision(spec.re_layout(), fit.theta_hat.rho());
    let k = active.len();
    // Gᵀ Q G with G = g_rowsᵀ
    let mut qg = DMatrix::zeros(q, k);
    for c in 0..k {
        let col: Vec<f64> = g_rows.row(c).iter().copied().collect();
        for (r, v) in prior.mul_vec(&col).into_iter().enumerate() {
            qg[(r, c)] = v;
        }
    }
    let gqg = &g_rows * qg;
    let trace = (cov * gqg).trace();
    Ok(-2.0 * trace)
}
