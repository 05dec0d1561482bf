//! Sensitivities of the fitted parameters and predicted random effects to
//! the data, by the implicit function theorem applied to the two
//! first-order conditions `∂l/∂θ = 0` and `∂l_j/∂Ψ = 0`.
//!
//! The data score `∂l/∂y` of the Laplace marginal is evaluated
//! analytically (envelope theorem plus the derivative of the log
//! determinant), as is its θ-gradient; the second derivatives in θ are
//! central differences of those.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimation::{inner_maximize_psi, laplace_eval, laplace_gradient, FitResult, InnerSolution};
use crate::joint::JointObjective;
use crate::model::{eta_unchecked, Dataset, ModelSpec, ObsKernel, ParameterVector, RandomEffectVector};
use crate::remat::ReFactor;

#[derive(Debug, Clone)]
pub struct EstimatorJacobians {
    /// `dθ̂ᵀ/dy`, `n_obs × dim θ`; columns of fixed or boundary parameters are zero.
    pub d_theta_dy: DMatrix<f64>,
    /// `dΨ̂ᵀ/dy`, `n_obs × q`.
    pub d_psi_dy: DMatrix<f64>,
    /// `∂Ψ̂ᵀ/∂θ`, `dim θ × q`: row `j` is the derivative of `Ψ̂` in `θ_j`.
    pub d_psi_dtheta: DMatrix<f64>,
    /// `∂²l/∂y∂θᵀ`, `n_obs × dim θ`, nonzero on `active` columns only.
    pub mixed_y_theta: DMatrix<f64>,
    /// `∂²l/∂θ∂θᵀ` restricted to `active`.
    pub theta_hessian: DMatrix<f64>,
    /// θ indices treated as estimated: free and not at a boundary.
    pub active: Vec<usize>,
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFiniteDerivative { row: i, col: j });
            }
        }
    }
    Ok(())
}

fn require_continuous(spec: &ModelSpec) -> Result<()> {
    if spec.family.is_continuous() {
        Ok(())
    } else {
        Err(Error::UnsupportedFamily(spec.family))
    }
}

/// `z_kᵀ H⁻¹ z_k` for every (year, age) cell, `z_k = σ e_t + δ e_{t,a}`.
fn cell_leverages(factor: &ReFactor, spec: &ModelSpec, theta: &ParameterVector) -> Vec<f64> {
    let layout = spec.re_layout();
    let mut out = vec![0.0; spec.n_years * spec.n_ages];
    if layout.is_empty() {
        return out;
    }
    let (s, d) = (theta.sigma(), theta.delta());
    let mut rhs = vec![0.0; layout.len()];
    for t in 0..spec.n_years {
        for a in 0..spec.n_ages {
            let (it, ita) = (layout.year_index(t), layout.interaction_index(t, a));
            rhs[it] = s;
            rhs[ita] = d;
            let x = factor.solve(&rhs);
            out[t * spec.n_ages + a] = s * x[it] + d * x[ita];
            rhs[it] = 0.0;
            rhs[ita] = 0.0;
        }
    }
    out
}

/// Analytic `∂l/∂y` of the Laplace marginal at θ, for continuous families.
pub fn marginal_score_y(
    spec: &ModelSpec,
    data: &Dataset,
    theta: &ParameterVector,
    warm: &RandomEffectVector,
    fit_options: &crate::estimation::FitOptions,
) -> Result<(Vec<f64>, InnerSolution)> {
    require_continuous(spec)?;
    let inner = inner_maximize_psi(spec, theta, data, warm, fit_options)?;
    let kernel = ObsKernel::new(spec, theta)?;
    let psi = &inner.psi;
    let layout = spec.re_layout();
    let a_n = spec.n_ages;
    let etas: Vec<f64> = data
        .observations
        .iter()
        .map(|o| eta_unchecked(theta, psi, o.t, o.a))
        .collect();
    let mut score: Vec<f64> = data
        .observations
        .iter()
        .zip(&etas)
        .map(|(o, &e)| kernel.d_y(o.y, e))
        .collect();
    if layout.is_empty() {
        return Ok((score, inner));
    }
    let lev = cell_leverages(&inner.factor, spec, theta);
    let (s, d) = (theta.sigma(), theta.delta());
    // v = Σ_k m_k (Σ_i ℓ'''_i) z_k
    let mut v = vec![0.0; layout.len()];
    for (o, &e) in data.observations.iter().zip(&etas) {
        let w = lev[o.t * a_n + o.a] * kernel.d3_eta(o.y, e);
        v[layout.year_index(o.t)] += s * w;
        v[layout.interaction_index(o.t, o.a)] += d * w;
    }
    let u = inner.factor.solve(&v);
    for ((sc, o), &e) in score.iter_mut().zip(&data.observations).zip(&etas) {
        let uz = s * u[layout.year_index(o.t)] + d * u[layout.interaction_index(o.t, o.a)];
        *sc += 0.5 * lev[o.t * a_n + o.a] * kernel.d3_eta_eta_y(o.y, e)
            + 0.5 * kernel.d2_eta_y(o.y, e) * uz;
    }
    Ok((score, inner))
}

fn perturbed(fit: &FitResult, j: usize, delta: f64) -> Result<ParameterVector> {
    let mut flat = fit.theta_hat.to_flat();
    flat[j] += delta;
    ParameterVector::from_flat(&fit.spec, &flat)
}

fn step(fit: &FitResult, j: usize, rel: f64) -> f64 {
    rel * (1.0 + fit.theta_hat.to_flat()[j].abs())
}

/// `∂²l/∂θ∂θᵀ` of the Laplace marginal over the given θ indices, by central
/// differences of the analytic gradient.
pub fn marginal_theta_hessian(fit: &FitResult, data: &Dataset, indices: &[usize]) -> Result<DMatrix<f64>> {
    let spec = &fit.spec;
    let k = indices.len();
    let mut hess = DMatrix::zeros(k, k);
    let grad_at = |theta: &ParameterVector| -> Result<Vec<f64>> {
        let e = laplace_eval(spec, data, theta, &fit.psi_hat, &fit.options)?;
        laplace_gradient(spec, data, theta, &e.inner)
    };
    for (c, &j) in indices.iter().enumerate() {
        let h = step(fit, j, fit.options.fd_step);
        let gp = grad_at(&perturbed(fit, j, h)?)?;
        let gm = grad_at(&perturbed(fit, j, -h)?)?;
        for (r, &i) in indices.iter().enumerate() {
            hess[(r, c)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    check_finite(&hess)?;
    Ok(hess)
}

/// `∂²l/∂y∂θᵀ` (`n_obs × dim θ`): central differences in θ of the analytic data score.
/// Columns outside `indices` are zero.
pub fn mixed_partial_marginal_y_theta(
    fit: &FitResult,
    data: &Dataset,
    indices: &[usize],
) -> Result<DMatrix<f64>> {
    require_continuous(&fit.spec)?;
    let n = data.len();
    let dim = fit.spec.param_layout().len();
    let mut m = DMatrix::zeros(n, dim);
    for &j in indices {
        let h = step(fit, j, fit.options.fd_step);
        let (sp, _) = marginal_score_y(&fit.spec, data, &perturbed(fit, j, h)?, &fit.psi_hat, &fit.options)?;
        let (sm, _) = marginal_score_y(&fit.spec, data, &perturbed(fit, j, -h)?, &fit.psi_hat, &fit.options)?;
        for i in 0..n {
            m[(i, j)] = (sp[i] - sm[i]) / (2.0 * h);
        }
    }
    check_finite(&m)?;
    Ok(m)
}

/// Inverse of a negative-definite θ-Hessian; refuses singular or indefinite input.
pub(crate) fn invert_theta_hessian(hess: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if hess.nrows() == 0 {
        return Ok(hess.clone());
    }
    let neg = -hess;
    let chol = neg
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("marginal θ-Hessian is not negative definite".into()))?;
    let diag = chol.l().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if lo * lo < 1e-12 * hi * hi {
        return Err(Error::Singular("marginal θ-Hessian is numerically singular".into()));
    }
    Ok(-chol.inverse())
}

/// `∂²l_j/∂θ∂Ψᵀ` at `(θ̂, Ψ̂)`, `dim θ × q`, by central differences of the analytic Ψ-gradient.
pub fn mixed_partial_joint_theta_psi(fit: &FitResult, data: &Dataset) -> Result<DMatrix<f64>> {
    let spec = &fit.spec;
    let dim = spec.param_layout().len();
    let q = spec.q();
    let mut m = DMatrix::zeros(dim, q);
    for j in 0..dim {
        let h = step(fit, j, fit.options.fd_step);
        let tp = perturbed(fit, j, h)?;
        let tm = perturbed(fit, j, -h)?;
        let gp = JointObjective::new(spec, data, &tp)?.gradient(&fit.psi_hat);
        let gm = JointObjective::new(spec, data, &tm)?.gradient(&fit.psi_hat);
        for k in 0..q {
            m[(j, k)] = (gp[k] - gm[k]) / (2.0 * h);
        }
    }
    check_finite(&m)?;
    Ok(m)
}

fn neg_joint_factor(fit: &FitResult) -> Result<ReFactor> {
    fit.joint_hessian_psi.negated().factor()
}

/// Rows of `m` multiplied on the right by `H⁻¹`, `H = -∂²l_j/∂Ψ∂Ψᵀ`.
fn right_solve(m: &DMatrix<f64>, factor: &ReFactor) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        let x = factor.solve(&row);
        for (k, v) in x.into_iter().enumerate() {
            out[(i, k)] = v;
        }
    }
    out
}

/// `∂Ψ̂ᵀ/∂θ = (∂²l_j/∂θ∂Ψᵀ)(-∂²l_j/∂Ψ∂Ψᵀ)⁻¹`, `dim θ × q`. All families.
pub fn d_psi_dtheta(fit: &FitResult, data: &Dataset) -> Result<DMatrix<f64>> {
    let c = mixed_partial_joint_theta_psi(fit, data)?;
    Ok(right_solve(&c, &neg_joint_factor(fit)?))
}

/// `dθ̂ᵀ/dy = -(∂²l/∂y∂θᵀ)(∂²l/∂θ∂θᵀ)⁻¹` over the active parameters.
pub fn d_theta_dy(fit: &FitResult, data: &Dataset) -> Result<DMatrix<f64>> {
    Ok(estimator_jacobians(fit, data)?.d_theta_dy)
}

/// `dΨ̂ᵀ/dy = {∂²l_j/∂y∂Ψᵀ + (dθ̂ᵀ/dy)·∂²l_j/∂θ∂Ψᵀ}(-∂²l_j/∂Ψ∂Ψᵀ)⁻¹`.
pub fn d_psi_dy(fit: &FitResult, data: &Dataset) -> Result<DMatrix<f64>> {
    Ok(estimator_jacobians(fit, data)?.d_psi_dy)
}

/// `∂²l_j/∂y∂Ψᵀ`, analytic: `y_i` enters only through its own cell.
fn mixed_partial_joint_y_psi(fit: &FitResult, data: &Dataset) -> Result<DMatrix<f64>> {
    let spec = &fit.spec;
    let theta = &fit.theta_hat;
    let kernel = ObsKernel::new(spec, theta)?;
    let layout = spec.re_layout();
    let mut m = DMatrix::zeros(data.len(), layout.len());
    if layout.is_empty() {
        return Ok(m);
    }
    let (s, d) = (theta.sigma(), theta.delta());
    for (i, o) in data.observations.iter().enumerate() {
        let c = kernel.d2_eta_y(o.y, eta_unchecked(theta, &fit.psi_hat, o.t, o.a));
        m[(i, layout.year_index(o.t))] = s * c;
        m[(i, layout.interaction_index(o.t, o.a))] = d * c;
    }
    Ok(m)
}

/// All Jacobians for a fit on continuous data.
pub fn estimator_jacobians(fit: &FitResult, data: &Dataset) -> Result<EstimatorJacobians> {
    require_continuous(&fit.spec)?;
    let active = fit.interior_free();
    let dim = fit.spec.param_layout().len();
    let n = data.len();

    let theta_hessian = marginal_theta_hessian(fit, data, &active)?;
    let hinv = invert_theta_hessian(&theta_hessian)?;
    let mixed_y_theta = mixed_partial_marginal_y_theta(fit, data, &active)?;

    let mut d_theta_dy = DMatrix::zeros(n, dim);
    if !active.is_empty() {
        let m_act = mixed_y_theta.select_columns(&active);
        let dt = -(m_act * &hinv);
        for (c, &j) in active.iter().enumerate() {
            d_theta_dy.set_column(j, &dt.column(c));
        }
    }

    let factor = neg_joint_factor(fit)?;
    let c_theta = mixed_partial_joint_theta_psi(fit, data)?;
    let d_psi_dtheta = right_solve(&c_theta, &factor);
    let c_y = mixed_partial_joint_y_psi(fit, data)?;
    let d_psi_dy = right_solve(&(c_y + &d_theta_dy * &c_theta), &factor);
    check_finite(&d_theta_dy)?;
    check_finite(&d_psi_dy)?;
    Ok(EstimatorJacobians {
        d_theta_dy,
        d_psi_dy,
        d_psi_dtheta,
        mixed_y_theta,
        theta_hessian,
        active,
    })
}

/// Max-norm residuals of the two defining identities,
/// `∂²l/∂y∂θᵀ + (dθ̂ᵀ/dy)(∂²l/∂θ∂θᵀ)` and
/// `∂²l_j/∂y∂Ψᵀ + (dθ̂ᵀ/dy)∂²l_j/∂θ∂Ψᵀ + (dΨ̂ᵀ/dy)∂²l_j/∂Ψ∂Ψᵀ`,
/// each relative to the max-norm of its first term.
pub fn lemma_residuals(fit: &FitResult, data: &Dataset, jac: &EstimatorJacobians) -> Result<(f64, f64)> {
    let rel = |r: &DMatrix<f64>, scale: &DMatrix<f64>| r.amax() / scale.amax().max(1e-300);
    let theta_res = if jac.active.is_empty() {
        0.0
    } else {
        let m = jac.mixed_y_theta.select_columns(&jac.active);
        let dt = jac.d_theta_dy.select_columns(&jac.active);
        rel(&(&m + dt * &jac.theta_hessian), &m)
    };
    let c_y = mixed_partial_joint_y_psi(fit, data)?;
    let c_theta = mixed_partial_joint_theta_psi(fit, data)?;
    let hpsi = fit.joint_hessian_psi.to_dense();
    let r = &c_y + &jac.d_theta_dy * c_theta + &jac.d_psi_dy * hpsi;
    Ok((theta_res, rel(&r, &c_y)))
}
