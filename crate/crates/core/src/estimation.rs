//! Maximum marginal likelihood by nested optimization.
//!
//! The inner problem maximizes the log-joint likelihood over the random
//! effects with damped Newton steps on the structured Hessian. The outer
//! problem maximizes the Laplace-approximated marginal likelihood over θ
//! with a box-projected BFGS driven by central finite-difference gradients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint::JointObjective;
use crate::model::{
    eta_unchecked, Dataset, Family, Link, ModelSpec, ObsKernel, ParamKind, ParameterVector,
    RandomEffectVector, ReLayout,
};
use crate::remat::{ReBlockMatrix, ReFactor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower clamp for `log δ`.
pub const LOG_DELTA_FLOOR: f64 = -10.0;
/// `log δ̂` below `LOG_DELTA_FLOOR + BOUNDARY_MARGIN` is reported as a boundary estimate.
pub const BOUNDARY_MARGIN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Max-norm of the inner gradient at which Newton iterations stop.
    pub tol_inner: f64,
    /// Max-norm of the projected outer gradient at which BFGS stops.
    pub tol_outer: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    /// Relative step of the central differences in θ.
    pub fd_step: f64,
    /// Starting θ; moment-based initial values when absent.
    pub start: Option<ParameterVector>,
    /// Parameters held at their starting values.
    pub fixed: Vec<ParamKind>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol_inner: 1e-10,
            tol_outer: 1e-8,
            max_inner: 100,
            max_outer: 400,
            fd_step: 1e-5,
            start: None,
            fixed: Vec::new(),
        }
    }
}

impl FitOptions {
    pub fn starting_at(mut self, theta: ParameterVector) -> Self {
        self.start = Some(theta);
        self
    }

    pub fn fixing(mut self, kinds: impl IntoIterator<Item = ParamKind>) -> Self {
        self.fixed.extend(kinds);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_inner > 0.0 && self.tol_outer > 0.0 && self.fd_step > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        if !self.fixed.is_empty() && self.start.is_none() {
            return Err(Error::InvalidParameter(
                "fixed parameters need a starting vector".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub theta_hat: ParameterVector,
    pub psi_hat: RandomEffectVector,
    /// `∂²l_j/∂Ψ∂Ψᵀ` at `(θ̂, Ψ̂)`; negative definite.
    pub joint_hessian_psi: ReBlockMatrix,
    pub marginal_loglik: f64,
    pub conditional_loglik: f64,
    pub converged: bool,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    /// Max-norm of the projected finite-difference gradient at `θ̂`.
    pub gradient_norm: f64,
    /// Flat indices of the estimated (non-fixed) parameters.
    pub free: Vec<usize>,
    /// Estimated parameters that ended at or near a boundary.
    pub boundary: Vec<ParamKind>,
    pub options: FitOptions,
}

impl FitResult {
    pub fn at_boundary(&self) -> bool {
        !self.boundary.is_empty()
    }

    /// Free parameters excluding those flagged at a boundary.
    pub fn interior_free(&self) -> Vec<usize> {
        let layout = self.spec.param_layout();
        self.free
            .iter()
            .copied()
            .filter(|&i| !self.boundary.contains(&layout.kind(i)))
            .collect()
    }

    /// `p_c`: estimated parameters that enter the conditional likelihood.
    pub fn n_conditional_params(&self) -> usize {
        let layout = self.spec.param_layout();
        self.free
            .iter()
            .filter(|&&i| self.spec.enters_conditional(layout.kind(i)))
            .count()
    }
}

// ---------------------------------------------------------------------------
// inner problem

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub psi: RandomEffectVector,
    pub log_joint: f64,
    pub cond_loglik: f64,
    /// `-∂²l_j/∂Ψ∂Ψᵀ` at the solution.
    pub neg_hessian: ReBlockMatrix,
    pub factor: ReFactor,
    pub iterations: usize,
    pub gradient_norm: f64,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn factor_with_ridge(curv: &ReBlockMatrix) -> Result<ReFactor> {
    if let Ok(f) = curv.factor() {
        return Ok(f);
    }
    let mut scale = 1e-8;
    for _ in 0..60 {
        let mut m = curv.clone();
        m.add_to_diagonal(|d| scale * (1.0 + d.abs()));
        if let Ok(f) = m.factor() {
            return Ok(f);
        }
        scale *= 2.0;
    }
    Err(Error::NotPositiveDefinite("ridge could not regularize the inner Hessian".into()))
}

fn inner_solve(obj: &JointObjective<'_>, init: &RandomEffectVector, options: &FitOptions) -> Result<InnerSolution> {
    let mut psi = init.to_flat();
    let mut value = obj.value(&obj.psi_from_flat(&psi));
    if !value.is_finite() {
        psi = vec![0.0; psi.len()];
        value = obj.value(&obj.psi_from_flat(&psi));
        if !value.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
    }
    let mut iterations = 0;
    let mut polished = false;
    let mut stalls = 0;
    loop {
        let current = obj.psi_from_flat(&psi);
        let (grad, curv) = obj.grad_and_curvature(&current);
        let gnorm = max_abs(&grad);
        if !gnorm.is_finite() {
            return Err(Error::InnerNotConverged {
                iterations,
                gradient_norm: gnorm,
            });
        }
        let converged = gnorm <= options.tol_inner;
        if polished || (converged && psi.is_empty()) {
            let factor = curv.factor()?;
            return Ok(InnerSolution {
                cond_loglik: obj.cond_loglik(&current),
                psi: current,
                log_joint: value,
                neg_hessian: curv,
                factor,
                iterations,
                gradient_norm: gnorm,
            });
        }
        if iterations >= options.max_inner {
            return Err(Error::InnerNotConverged {
                iterations,
                gradient_norm: gnorm,
            });
        }
        let factor = factor_with_ridge(&curv)?;
        let step = factor.solve(&grad);
        let slack = 1e-14 * (1.0 + value.abs());
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = psi.iter().zip(&step).map(|(p, s)| p + alpha * s).collect();
            let tv = obj.value(&obj.psi_from_flat(&trial));
            if tv.is_finite() && tv >= value - slack {
                psi = trial;
                value = tv;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        iterations += 1;
        if converged {
            // one extra Newton step drives the gradient to rounding level
            polished = true;
        } else if !accepted {
            stalls += 1;
            if stalls > 3 {
                return Err(Error::InnerNotConverged {
                    iterations,
                    gradient_norm: gnorm,
                });
            }
        }
    }
}

/// Empirical Bayes random effects `Ψ̂(θ)` maximizing the log-joint likelihood.
pub fn inner_maximize_psi(
    spec: &ModelSpec,
    theta: &ParameterVector,
    data: &Dataset,
    psi_init: &RandomEffectVector,
    options: &FitOptions,
) -> Result<InnerSolution> {
    let obj = JointObjective::new(spec, data, theta)?;
    inner_solve(&obj, psi_init, options)
}

/// Exact `∂²l_j/∂Ψ∂Ψᵀ`.
pub fn joint_hessian_psi(
    spec: &ModelSpec,
    theta: &ParameterVector,
    psi: &RandomEffectVector,
    data: &Dataset,
) -> Result<ReBlockMatrix> {
    let obj = JointObjective::new(spec, data, theta)?;
    Ok(obj.grad_and_curvature(psi).1.negated())
}

/// Analytic `∂l_j/∂Ψ`.
pub fn joint_gradient_psi(
    spec: &ModelSpec,
    theta: &ParameterVector,
    psi: &RandomEffectVector,
    data: &Dataset,
) -> Result<Vec<f64>> {
    let obj = JointObjective::new(spec, data, theta)?;
    Ok(obj.gradient(psi))
}

// ---------------------------------------------------------------------------
// Laplace marginal

#[derive(Debug, Clone)]
pub struct LaplaceEval {
    pub value: f64,
    pub inner: InnerSolution,
}

pub(crate) fn laplace_eval(
    spec: &ModelSpec,
    data: &Dataset,
    theta: &ParameterVector,
    warm: &RandomEffectVector,
    options: &FitOptions,
) -> Result<LaplaceEval> {
    let inner = inner_maximize_psi(spec, theta, data, warm, options)?;
    let q = inner.psi.len() as f64;
    let value = inner.log_joint - 0.5 * inner.factor.log_det() + 0.5 * q * LN_2PI;
    Ok(LaplaceEval { value, inner })
}

/// Laplace approximation to the log-marginal likelihood `log f(y | θ)`.
pub fn laplace_marginal(
    spec: &ModelSpec,
    theta: &ParameterVector,
    data: &Dataset,
    options: &FitOptions,
) -> Result<f64> {
    let warm = RandomEffectVector::zeros(spec.re_layout());
    Ok(laplace_eval(spec, data, theta, &warm, options)?.value)
}

/// `∂Q/∂ρ` of the AR(1) prior precision, embedded in the random-effect layout.
fn prior_precision_drho(layout: ReLayout, rho: f64) -> ReBlockMatrix {
    let mut m = ReBlockMatrix::zeros(layout);
    let t = layout.n_re_years();
    if t < 2 {
        return m;
    }
    let c = 1.0 / (1.0 - rho * rho);
    for i in 0..t {
        m.year_diag[i] = if i == 0 || i == t - 1 {
            2.0 * rho * c * c
        } else {
            2.0 * rho * c * c * (1.0 + rho * rho) + 2.0 * rho * c
        };
    }
    m.year_off.iter_mut().for_each(|v| *v = -2.0 * rho * rho * c * c - c);
    m
}

/// Analytic gradient of the Laplace marginal in the flat θ coordinates,
/// given the inner solution at θ.
pub(crate) fn laplace_gradient(
    spec: &ModelSpec,
    data: &Dataset,
    theta: &ParameterVector,
    inner: &InnerSolution,
) -> Result<Vec<f64>> {
    let kernel = ObsKernel::new(spec, theta)?;
    let params = spec.param_layout();
    let layout = spec.re_layout();
    let dim = params.len();
    let a_n = spec.n_ages;
    let n_cells = spec.n_years * a_n;
    let psi = &inner.psi;
    let enabled = !layout.is_empty();
    let (s, d) = (theta.sigma(), theta.delta());
    let rho = theta.rho();
    let i_sigma = params.index(ParamKind::LogSigma).unwrap();
    let i_delta = params.index(ParamKind::LogDelta).unwrap();
    let i_rho = params.index(ParamKind::RhoRaw).unwrap();
    let i_disp = params.index(ParamKind::Dispersion).unwrap();
    let i_pow = params.index(ParamKind::Power);
    let dp_draw = {
        let p = theta.power(spec);
        (p - 1.0) * (2.0 - p)
    };

    // per-cell sums of the η-derivatives and of the direct dispersion/power derivatives
    let mut g1 = vec![0.0; n_cells];
    let mut g2 = vec![0.0; n_cells];
    let mut g3 = vec![0.0; n_cells];
    let mut g1_disp = vec![0.0; n_cells];
    let mut g2_disp = vec![0.0; n_cells];
    let mut g1_pow = vec![0.0; n_cells];
    let mut g2_pow = vec![0.0; n_cells];
    let mut grad = vec![0.0; dim];
    for o in &data.observations {
        let k = o.t * a_n + o.a;
        let eta = eta_unchecked(theta, psi, o.t, o.a);
        let (l1, l2) = kernel.eta_derivs(o.y, eta);
        g1[k] += l1;
        g2[k] += l2;
        g3[k] += kernel.d3_eta(o.y, eta);
        g1_disp[k] += kernel.d_eta_logdisp(o.y, eta);
        g2_disp[k] += kernel.d2_eta_logdisp(o.y, eta);
        grad[i_disp] += kernel.d_logdisp(o.y, eta)?;
        if let Some(ip) = i_pow {
            let (lp, gp, hp) = kernel.power_derivs(o.y, eta)?;
            grad[ip] += lp * dp_draw;
            g1_pow[k] += gp * dp_draw;
            g2_pow[k] += hp * dp_draw;
        }
    }
    for t in 0..spec.n_years {
        for a in 0..a_n {
            let k = t * a_n + a;
            grad[a] += g1[k];
            if enabled {
                grad[i_sigma] += g1[k] * s * psi.year(t);
                grad[i_delta] += g1[k] * d * psi.interaction(t, a);
            }
        }
    }
    if !enabled {
        return Ok(grad);
    }

    let t_years = layout.n_re_years();
    let jac_rho = 1.0 - rho * rho;
    let q_drho = prior_precision_drho(layout, rho);
    let qd_psi = q_drho.mul_vec(&psi.to_flat());
    let quad: f64 = psi.year_effects.iter().zip(&qd_psi).map(|(a, b)| a * b).sum();
    grad[i_rho] += (rho * (t_years as f64 - 1.0) / (1.0 - rho * rho) - 0.5 * quad) * jac_rho;

    // ∂η/∂θ_j of cell (t, a) at fixed Ψ
    let deta = |j: usize, t: usize, a: usize| -> f64 {
        match params.kind(j) {
            ParamKind::Q(i) if i == a => 1.0,
            ParamKind::LogSigma => s * psi.year(t),
            ParamKind::LogDelta => d * psi.interaction(t, a),
            _ => 0.0,
        }
    };

    // c_j = ∂(∂l_j/∂Ψ)/∂θ_j and u_j = H⁻¹ c_j = ∂Ψ̂/∂θ_j
    let mut u = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut c = vec![0.0; layout.len()];
        if j == i_rho {
            for (ci, v) in c.iter_mut().zip(&qd_psi).take(t_years) {
                *ci = -v * jac_rho;
            }
        }
        for t in 0..t_years {
            for a in 0..a_n {
                let k = t * a_n + a;
                let mut dg1 = g2[k] * deta(j, t, a);
                if j == i_disp {
                    dg1 += g1_disp[k];
                }
                if Some(j) == i_pow {
                    dg1 += g1_pow[k];
                }
                let (it, ita) = (layout.year_index(t), layout.interaction_index(t, a));
                c[it] += dg1 * s;
                c[ita] += dg1 * d;
                if j == i_sigma {
                    c[it] += g1[k] * s;
                }
                if j == i_delta {
                    c[ita] += g1[k] * d;
                }
            }
        }
        u.push(inner.factor.solve(&c));
    }

    // trace{H⁻¹ dH/dθ_j}, H = Q + Σ_k w_k z_k z_kᵀ
    let mut tr = vec![0.0; dim];
    tr[i_rho] += inner.factor.trace_inv_times(&q_drho) * jac_rho;
    let mut z = vec![0.0; layout.len()];
    for t in 0..t_years {
        for a in 0..a_n {
            let k = t * a_n + a;
            let w = -g2[k];
            if w == 0.0 && g3[k] == 0.0 && g2_disp[k] == 0.0 && g2_pow[k] == 0.0 {
                continue;
            }
            let (it, ita) = (layout.year_index(t), layout.interaction_index(t, a));
            z[it] = s;
            z[ita] = d;
            let x = inner.factor.solve(&z);
            z[it] = 0.0;
            z[ita] = 0.0;
            let m = s * x[it] + d * x[ita];
            for (j, trj) in tr.iter_mut().enumerate() {
                let zu = s * u[j][it] + d * u[j][ita];
                let mut dw = -g3[k] * (deta(j, t, a) + zu);
                if j == i_disp {
                    dw -= g2_disp[k];
                }
                if Some(j) == i_pow {
                    dw -= g2_pow[k];
                }
                *trj += dw * m;
                if j == i_sigma {
                    *trj += 2.0 * w * s * x[it];
                }
                if j == i_delta {
                    *trj += 2.0 * w * d * x[ita];
                }
            }
        }
    }
    for (g, t) in grad.iter_mut().zip(&tr) {
        *g -= 0.5 * t;
    }
    if let Some(j) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteDerivative { row: 0, col: j });
    }
    Ok(grad)
}

/// Gradient of [`laplace_marginal`] in the flat θ coordinates.
pub fn laplace_marginal_gradient(
    spec: &ModelSpec,
    theta: &ParameterVector,
    data: &Dataset,
    options: &FitOptions,
) -> Result<Vec<f64>> {
    let warm = RandomEffectVector::zeros(spec.re_layout());
    let e = laplace_eval(spec, data, theta, &warm, options)?;
    laplace_gradient(spec, data, theta, &e.inner)
}

/// Evaluates the marginal likelihood over the free coordinates of θ.
pub(crate) struct MarginalFn<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub options: &'a FitOptions,
    pub base: Vec<f64>,
    pub free: Vec<usize>,
}

impl MarginalFn<'_> {
    pub fn theta(&self, x: &[f64]) -> Result<ParameterVector> {
        let mut flat = self.base.clone();
        for (&i, &v) in self.free.iter().zip(x) {
            flat[i] = v;
        }
        ParameterVector::from_flat(self.spec, &flat)
    }

    pub fn x_of(&self, theta: &ParameterVector) -> Vec<f64> {
        let flat = theta.to_flat();
        self.free.iter().map(|&i| flat[i]).collect()
    }

    pub fn eval(&self, x: &[f64], warm: &RandomEffectVector) -> Result<LaplaceEval> {
        let theta = self.theta(x)?;
        laplace_eval(self.spec, self.data, &theta, warm, self.options)
    }

    /// Gradient over the free coordinates from an evaluation at `x`.
    pub fn gradient_at(&self, x: &[f64], e: &LaplaceEval) -> Result<Vec<f64>> {
        let theta = self.theta(x)?;
        let g = laplace_gradient(self.spec, self.data, &theta, &e.inner)?;
        Ok(self.free.iter().map(|&i| g[i]).collect())
    }
}

fn bounds(kind: ParamKind) -> (f64, f64) {
    match kind {
        ParamKind::LogDelta => (LOG_DELTA_FLOOR, 5.0),
        ParamKind::LogSigma => (-10.0, 5.0),
        ParamKind::RhoRaw => (-8.0, 8.0),
        ParamKind::Dispersion => (-15.0, 15.0),
        ParamKind::Power => (-12.0, 12.0),
        ParamKind::Q(_) => (-50.0, 50.0),
    }
}

// ---------------------------------------------------------------------------
// initialization

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        f64::NAN
    };
    (m, var)
}

/// Per-age link-scale means for `q`, within-cell moments for the dispersion,
/// `σ = δ = 0.5`, `ρ = 0`.
pub fn initial_parameters(spec: &ModelSpec, data: &Dataset) -> ParameterVector {
    let a = spec.n_ages;
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); spec.n_years * a];
    let mut by_age: Vec<Vec<f64>> = vec![Vec::new(); a];
    for o in &data.observations {
        cells[o.t * a + o.a].push(o.y);
        by_age[o.a].push(o.y);
    }
    let p = spec.power();
    // average of a per-cell dispersion moment over usable cells
    let moment = |f: &dyn Fn(f64, f64) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = cells
            .iter()
            .filter(|c| c.len() > 1)
            .filter_map(|c| {
                let (m, v) = mean_var(c);
                f(m, v).filter(|x| x.is_finite() && *x > 0.0)
            })
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let dispersion = match spec.family {
        Family::Gaussian => moment(&|_, v| Some(v)).map(f64::sqrt),
        Family::Gamma => moment(&|m, v| (v > 0.0).then(|| m * m / v)),
        Family::NegBin => moment(&|m, v| (m > 0.0).then(|| ((v - m) / (m * m)).max(0.01))),
        Family::Tweedie => moment(&|m, v| (m > 0.0 && v > 0.0).then(|| v / m.powf(p))),
    }
    .unwrap_or(0.5)
    .clamp(1e-3, 1e3);

    let q = by_age
        .iter()
        .map(|ys| {
            if ys.is_empty() {
                return 0.0;
            }
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            match spec.link {
                Link::Identity => m,
                Link::Log => m.max(1e-2).ln(),
                Link::ShiftedScaledLogit => {
                    let s = ((m / dispersion - 0.5) / 1.5).clamp(0.02, 0.98);
                    (s / (1.0 - s)).ln()
                }
            }
        })
        .collect();
    let mut theta = ParameterVector::from_natural(q, 0.5, 0.5, 0.0, dispersion)
        .expect("initial values are valid");
    if spec.param_layout().has_power {
        theta = theta.with_power(p).expect("spec power is valid");
    }
    theta
}

// ---------------------------------------------------------------------------
// outer problem

struct OuterState {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    psi: RandomEffectVector,
}

/// Fit the model: `θ̂` maximizes the Laplace marginal, `Ψ̂ = Ψ̂(θ̂)`.
///
/// Non-convergence of the outer problem is reported through
/// [`FitResult::converged`]; failures of the starting point are errors.
pub fn fit(data: &Dataset, spec: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    spec.validate()?;
    data.validate(spec)?;
    options.validate()?;
    let start = match &options.start {
        Some(t) => t.clone(),
        None => initial_parameters(spec, data),
    };
    start.validate(spec)?;
    let layout = spec.param_layout();
    let mut fixed = options.fixed.clone();
    if !spec.random_effects {
        fixed.extend([ParamKind::LogSigma, ParamKind::LogDelta, ParamKind::RhoRaw]);
    }
    let free: Vec<usize> = (0..layout.len())
        .filter(|&i| !fixed.contains(&layout.kind(i)))
        .collect();
    let (lo, hi): (Vec<f64>, Vec<f64>) = free.iter().map(|&i| bounds(layout.kind(i))).unzip();

    let mf = MarginalFn {
        spec,
        data,
        options,
        base: start.to_flat(),
        free: free.clone(),
    };
    let project = |x: &mut [f64]| {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(lo[j], hi[j]);
        }
    };

    let mut x0 = mf.x_of(&start);
    project(&mut x0);
    let psi0 = RandomEffectVector::zeros(spec.re_layout());
    let e0 = mf.eval(&x0, &psi0)?;
    let mut inner_iterations = e0.inner.iterations;
    let g0 = mf.gradient_at(&x0, &e0)?;
    let mut st = OuterState {
        f: -e0.value,
        g: g0.iter().map(|v| -v).collect(),
        psi: e0.inner.psi,
        x: x0,
    };

    let n = free.len();
    let identity = |n: usize| {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        h
    };
    let mut hinv = identity(n);
    let mut fresh = true;
    let mut outer_iterations = 0;
    let mut stagnant = 0;

    let active = |x: &[f64], g: &[f64]| -> Vec<bool> {
        (0..n)
            .map(|j| (x[j] <= lo[j] + 1e-12 && g[j] > 0.0) || (x[j] >= hi[j] - 1e-12 && g[j] < 0.0))
            .collect()
    };
    let projected_norm = |x: &[f64], g: &[f64]| -> f64 {
        let act = active(x, g);
        (0..n).filter(|&j| !act[j]).fold(0.0_f64, |m, j| m.max(g[j].abs()))
    };

    let mut gnorm = projected_norm(&st.x, &st.g);
    while gnorm > options.tol_outer && outer_iterations < options.max_outer {
        let act = active(&st.x, &st.g);
        let pg: Vec<f64> = (0..n).map(|j| if act[j] { 0.0 } else { st.g[j] }).collect();
        let mut d: Vec<f64> = (0..n)
            .map(|i| -(0..n).map(|j| hinv[i * n + j] * pg[j]).sum::<f64>())
            .collect();
        for j in 0..n {
            if act[j] {
                d[j] = 0.0;
            }
        }
        let mut slope: f64 = d.iter().zip(&pg).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            hinv = identity(n);
            fresh = true;
            d = pg.iter().map(|v| -v).collect();
            slope = -pg.iter().map(|v| v * v).sum::<f64>();
        }
        let mut alpha = if fresh { (1.0 / max_abs(&d)).min(1.0) } else { 1.0 };

        let mut next: Option<(Vec<f64>, LaplaceEval)> = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = st.x.iter().zip(&d).map(|(x, d)| x + alpha * d).collect();
            project(&mut trial);
            let moved: f64 = trial.iter().zip(&st.x).zip(&st.g).map(|((t, x), g)| (t - x) * g).sum();
            if let Ok(e) = mf.eval(&trial, &st.psi) {
                inner_iterations += e.inner.iterations;
                let ft = -e.value;
                if ft.is_finite() && ft <= st.f + 1e-4 * moved {
                    next = Some((trial, e));
                    break;
                }
            }
            alpha *= 0.5;
        }
        outer_iterations += 1;
        let Some((x_new, e_new)) = next else {
            if fresh {
                break;
            }
            hinv = identity(n);
            fresh = true;
            continue;
        };
        let g_new: Vec<f64> = mf
            .gradient_at(&x_new, &e_new)?
            .iter()
            .map(|v| -v)
            .collect();
        let f_new = -e_new.value;
        let s: Vec<f64> = x_new.iter().zip(&st.x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&st.g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let yy: f64 = yv.iter().map(|v| v * v).sum();
        if sy > 1e-12 * yy.sqrt() * s.iter().map(|v| v * v).sum::<f64>().sqrt() {
            if fresh {
                let scale = sy / yy;
                hinv.iter_mut().for_each(|v| *v *= scale);
            }
            // H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| hinv[i * n + j] * yv[j]).sum())
                .collect();
            let yhy: f64 = yv.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    hinv[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            fresh = false;
        }
        if (st.f - f_new).abs() <= 1e-15 * (1.0 + st.f.abs()) {
            stagnant += 1;
        } else {
            stagnant = 0;
        }
        st = OuterState {
            x: x_new,
            f: f_new,
            g: g_new,
            psi: e_new.inner.psi,
        };
        gnorm = projected_norm(&st.x, &st.g);
        if stagnant >= 3 {
            break;
        }
    }

    // Newton polish on the analytic gradient once the line search can no
    // longer resolve decreases of the objective
    let mut polish = 0;
    while gnorm > options.tol_outer && polish < 8 && outer_iterations < options.max_outer {
        polish += 1;
        outer_iterations += 1;
        let act = active(&st.x, &st.g);
        let idx: Vec<usize> = (0..n).filter(|&j| !act[j]).collect();
        let k = idx.len();
        let mut hm = DMatrix::zeros(k, k);
        for (c, &j) in idx.iter().enumerate() {
            let h = options.fd_step * (1.0 + st.x[j].abs());
            let mut xp = st.x.clone();
            xp[j] += h;
            let mut xm = st.x.clone();
            xm[j] -= h;
            let gp = mf.gradient_at(&xp, &mf.eval(&xp, &st.psi)?)?;
            let gm = mf.gradient_at(&xm, &mf.eval(&xm, &st.psi)?)?;
            for (r, &i) in idx.iter().enumerate() {
                hm[(r, c)] = -(gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let hm = (&hm + hm.transpose()) * 0.5;
        let Some(chol) = hm.cholesky() else { break };
        let rhs = DVector::from_iterator(k, idx.iter().map(|&i| -st.g[i]));
        let stepv = chol.solve(&rhs);
        let mut trial = st.x.clone();
        for (r, &i) in idx.iter().enumerate() {
            trial[i] += stepv[r];
        }
        project(&mut trial);
        let Ok(e) = mf.eval(&trial, &st.psi) else { break };
        let g_new: Vec<f64> = mf.gradient_at(&trial, &e)?.iter().map(|v| -v).collect();
        let norm_new = projected_norm(&trial, &g_new);
        if !(norm_new < gnorm) {
            break;
        }
        inner_iterations += e.inner.iterations;
        st = OuterState {
            x: trial,
            f: -e.value,
            g: g_new,
            psi: e.inner.psi,
        };
        gnorm = norm_new;
    }

    let theta_hat = mf.theta(&st.x)?;
    let final_eval = mf.eval(&st.x, &st.psi)?;
    let mut boundary = Vec::new();
    if let Some(j) = free.iter().position(|&i| layout.kind(i) == ParamKind::LogDelta) {
        if st.x[j] <= LOG_DELTA_FLOOR + BOUNDARY_MARGIN {
            boundary.push(ParamKind::LogDelta);
        }
    }
    Ok(FitResult {
        spec: spec.clone(),
        theta_hat,
        psi_hat: final_eval.inner.psi.clone(),
        joint_hessian_psi: final_eval.inner.neg_hessian.negated(),
        marginal_loglik: final_eval.value,
        conditional_loglik: final_eval.inner.cond_loglik,
        converged: gnorm <= options.tol_outer,
        inner_iterations: inner_iterations + final_eval.inner.iterations,
        outer_iterations,
        gradient_norm: gnorm,
        free,
        boundary,
        options: options.clone(),
    })
}
