//! Data generation and the Monte Carlo protocol for the true and estimated
//! bias corrections.
//!
//! Each outer replicate owns a ChaCha20 stream selected by its index, so
//! results do not depend on how replicates are scheduled across threads.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::caic::{caic_method2, method1_penalty};
use crate::derivatives::estimator_jacobians;
use crate::error::{Error, Result};
use crate::estimation::{fit, FitOptions};
use crate::model::{
    eta_unchecked, Dataset, Family, ModelSpec, ObsKernel, Observation, ParameterVector,
    RandomEffectVector,
};

/// Share of discarded replicates above which a warning is attached.
pub const DISCARD_WARNING_SHARE: f64 = 0.2;

/// Stationary AR(1) path with unit marginal variance.
pub fn sample_ar1<R: Rng + ?Sized>(len: usize, rho: f64, rng: &mut R) -> Vec<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut out = Vec::with_capacity(len);
    let mut prev = 0.0;
    for t in 0..len {
        let e: f64 = StandardNormal.sample(rng);
        prev = if t == 0 { e } else { rho * prev + innov * e };
        out.push(prev);
    }
    out
}

/// Random effects from their prior at θ.
pub fn draw_random_effects<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &ParameterVector,
    rng: &mut R,
) -> RandomEffectVector {
    let layout = spec.re_layout();
    let mut psi = RandomEffectVector::zeros(layout);
    if layout.is_empty() {
        return psi;
    }
    psi.year_effects = sample_ar1(layout.n_re_years(), theta.rho(), rng);
    for v in psi.interaction_effects.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    psi
}

/// Compound Poisson-gamma draw with mean `mu` and variance `phi·mu^p`.
pub fn tweedie_sample<R: Rng + ?Sized>(mu: f64, phi: f64, p: f64, rng: &mut R) -> Result<f64> {
    if !(mu > 0.0 && phi > 0.0 && p > 1.0 && p < 2.0) {
        return Err(Error::InvalidParameter(format!(
            "tweedie sampler requires mu > 0, phi > 0, 1 < p < 2 (got {mu}, {phi}, {p})"
        )));
    }
    let lambda = crate::tweedie::poisson_rate(mu, phi, p);
    let n = poisson(lambda, rng)?;
    if n == 0.0 {
        return Ok(0.0);
    }
    let shape = n * (2.0 - p) / (p - 1.0);
    let scale = phi * (p - 1.0) * mu.powf(p - 1.0);
    gamma(shape, scale, rng)
}

fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let d = Poisson::new(lambda).map_err(|e| Error::InvalidParameter(format!("poisson({lambda}): {e}")))?;
    Ok(d.sample(rng))
}

fn gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    let d = Gamma::new(shape, scale)
        .map_err(|e| Error::InvalidParameter(format!("gamma({shape}, {scale}): {e}")))?;
    Ok(d.sample(rng))
}

fn sample_observation<R: Rng + ?Sized>(kernel: &ObsKernel, eta: f64, rng: &mut R) -> Result<f64> {
    let k = kernel.disp;
    let (mean, _) = kernel.mean_var(eta);
    match kernel.family {
        Family::Gaussian => {
            let e: f64 = StandardNormal.sample(rng);
            Ok(mean + k * e)
        }
        // mean k·scale in both parameterizations
        Family::Gamma => {
            let y = gamma(k, mean / k, rng)?;
            // a draw that underflows to 0 would leave the support
            Ok(y.max(f64::MIN_POSITIVE))
        }
        Family::NegBin => {
            let r = 1.0 / k;
            let lambda = gamma(r, mean / r, rng)?;
            poisson(lambda, rng)
        }
        Family::Tweedie => tweedie_sample(mean, k, kernel.power, rng),
    }
}

/// One response per replicate of every (year, age) cell, in year-major order.
pub fn simulate_dataset<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &ParameterVector,
    psi: &RandomEffectVector,
    rng: &mut R,
) -> Result<Dataset> {
    let kernel = ObsKernel::new(spec, theta)?;
    let mut obs = Vec::with_capacity(spec.n_observations());
    for t in 0..spec.n_years {
        for a in 0..spec.n_ages {
            let eta = eta_unchecked(theta, psi, t, a);
            for _ in 0..spec.replicates {
                obs.push(Observation {
                    t,
                    a,
                    y: sample_observation(&kernel, eta, rng)?,
                });
            }
        }
    }
    Ok(Dataset { observations: obs })
}

/// Fresh responses on the design of `data`.
pub fn resample_responses<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &ParameterVector,
    psi: &RandomEffectVector,
    data: &Dataset,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let kernel = ObsKernel::new(spec, theta)?;
    data.observations
        .iter()
        .map(|o| sample_observation(&kernel, eta_unchecked(theta, psi, o.t, o.a), rng))
        .collect()
}

// ---------------------------------------------------------------------------
// Monte Carlo protocol

/// Source of the conditional moments used by Method 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovSource {
    #[default]
    Fitted,
    True,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub spec: ModelSpec,
    pub theta_true: ParameterVector,
    pub n_out: usize,
    pub n_inner: usize,
    pub seed: u64,
    pub method1: bool,
    pub method2: bool,
    #[serde(default)]
    pub cov_source: CovSource,
    #[serde(default)]
    pub fit_options: FitOptions,
    /// Test hook: every inner dataset equals the outer one.
    #[serde(skip)]
    pub inner_equals_outer: bool,
}

impl SimConfig {
    pub fn new(spec: ModelSpec, theta_true: ParameterVector, n_out: usize, n_inner: usize, seed: u64) -> Self {
        Self {
            spec,
            theta_true,
            n_out,
            n_inner,
            seed,
            method1: false,
            method2: true,
            cov_source: CovSource::Fitted,
            fit_options: FitOptions::default(),
            inner_equals_outer: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.theta_true.validate(&self.spec)?;
        if self.n_out == 0 || self.n_inner == 0 {
            return Err(Error::Config("n_out and n_inner must be at least 1".into()));
        }
        if !(self.method1 || self.method2) {
            return Err(Error::Config("no cAIC method selected".into()));
        }
        if self.method1 && !self.spec.family.is_continuous() {
            return Err(Error::UnsupportedFamily(self.spec.family));
        }
        self.fit_options.validate()
    }

    /// The generator of outer replicate `index`.
    pub fn replicate_rng(&self, index: usize) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub converged: bool,
    pub discarded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub boundary: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_hat: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bc_true: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty_method1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty_method2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method2_trace: Option<f64>,
    pub outer_iterations: usize,
    pub gradient_norm: f64,
}

impl ReplicateRecord {
    fn discarded(index: usize, reason: String) -> Self {
        Self {
            index,
            converged: false,
            discarded: true,
            reason: Some(reason),
            boundary: false,
            theta_hat: None,
            bc_true: None,
            penalty_method1: None,
            penalty_method2: None,
            method2_trace: None,
            outer_iterations: 0,
            gradient_norm: f64::NAN,
        }
    }
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_sample(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            f64::NAN
        };
        Self { value: mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub bc_true: Estimate,
    pub bc_est_method1: Option<Estimate>,
    pub bc_est_method2: Option<Estimate>,
    pub rb_method1: Option<Estimate>,
    pub rb_method2: Option<Estimate>,
    pub n_converged: usize,
    pub n_discarded: usize,
    pub warnings: Vec<String>,
    pub records: Vec<ReplicateRecord>,
}

/// `(BC_est - BC_true) / BC_true`.
pub fn relative_bias(bc_est: f64, bc_true: f64) -> Result<f64> {
    if bc_true == 0.0 {
        return Err(Error::ZeroBiasCorrection);
    }
    Ok((bc_est - bc_true) / bc_true)
}

/// Relative bias of paired per-replicate estimates, with a delta-method standard error.
pub fn paired_relative_bias(est: &[f64], truth: &[f64]) -> Result<Estimate> {
    let e = Estimate::from_sample(est).value;
    let t = Estimate::from_sample(truth).value;
    let rb = relative_bias(e, t)?;
    let d: Vec<f64> = est.iter().zip(truth).map(|(e, t)| e - (1.0 + rb) * t).collect();
    let se = Estimate::from_sample(&d).se / t.abs();
    Ok(Estimate { value: rb, se })
}

/// One outer replicate: draw, fit, penalties and the inner Monte Carlo.
pub fn run_replicate(config: &SimConfig, index: usize) -> ReplicateRecord {
    match replicate_inner(config, index) {
        Ok(r) => r,
        Err(e) => ReplicateRecord::discarded(index, e.to_string()),
    }
}

fn replicate_inner(config: &SimConfig, index: usize) -> Result<ReplicateRecord> {
    let spec = &config.spec;
    let theta_o = &config.theta_true;
    let mut rng = config.replicate_rng(index);
    let psi_o = draw_random_effects(spec, theta_o, &mut rng);
    let data = simulate_dataset(spec, theta_o, &psi_o, &mut rng)?;

    let fitted = fit(&data, spec, &config.fit_options)?;
    let mut rec = ReplicateRecord {
        index,
        converged: fitted.converged,
        discarded: false,
        reason: None,
        boundary: fitted.at_boundary(),
        theta_hat: Some(fitted.theta_hat.to_flat()),
        bc_true: None,
        penalty_method1: None,
        penalty_method2: None,
        method2_trace: None,
        outer_iterations: fitted.outer_iterations,
        gradient_norm: fitted.gradient_norm,
    };
    if !fitted.converged {
        rec.discarded = true;
        rec.reason = Some(format!("outer gradient norm {:.3e}", fitted.gradient_norm));
        return Ok(rec);
    }

    let penalties = (|| -> Result<(Option<f64>, Option<(f64, f64)>)> {
        let m2 = if config.method2 {
            let r = caic_method2(&fitted, &data)?;
            Some((r.method2_penalty, r.method2_trace))
        } else {
            None
        };
        let m1 = if config.method1 {
            let jac = estimator_jacobians(&fitted, &data)?;
            let moments = match config.cov_source {
                CovSource::Fitted => spec.cond_mean_cov(&fitted.theta_hat, &fitted.psi_hat, &data)?,
                CovSource::True => spec.cond_mean_cov(theta_o, &psi_o, &data)?,
            };
            Some(method1_penalty(&fitted, &data, &jac, &moments)?)
        } else {
            None
        };
        Ok((m1, m2))
    })();
    let (m1, m2) = match penalties {
        Ok(p) => p,
        Err(e) => {
            rec.discarded = true;
            rec.reason = Some(e.to_string());
            return Ok(rec);
        }
    };
    rec.penalty_method1 = m1;
    rec.penalty_method2 = m2.map(|v| v.0);
    rec.method2_trace = m2.map(|v| v.1);

    let lc_obs = spec.log_cond_likelihood(&fitted.theta_hat, &fitted.psi_hat, &data)?;
    let mut lc_sum = 0.0;
    for _ in 0..config.n_inner {
        let lc = if config.inner_equals_outer {
            lc_obs
        } else {
            let ystar = resample_responses(spec, theta_o, &psi_o, &data, &mut rng)?;
            spec.log_cond_likelihood(&fitted.theta_hat, &fitted.psi_hat, &data.with_responses(&ystar))?
        };
        lc_sum += lc;
    }
    rec.bc_true = Some(-2.0 * (lc_sum / config.n_inner as f64 - lc_obs));
    Ok(rec)
}

#[cfg(feature = "parallel")]
fn run_all(config: &SimConfig) -> Vec<ReplicateRecord> {
    use rayon::prelude::*;
    (0..config.n_out)
        .into_par_iter()
        .map(|k| run_replicate(config, k))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_all(config: &SimConfig) -> Vec<ReplicateRecord> {
    (0..config.n_out).map(|k| run_replicate(config, k)).collect()
}

/// Summarize replicate records in index order.
pub fn aggregate(config: &SimConfig, records: Vec<ReplicateRecord>) -> Result<SimResult> {
    let kept: Vec<&ReplicateRecord> = records.iter().filter(|r| !r.discarded).collect();
    let n_converged = kept.len();
    let n_discarded = records.len() - n_converged;
    if n_converged == 0 {
        return Err(Error::NoConvergedReplicates { n_out: config.n_out });
    }
    let truth: Vec<f64> = kept.iter().map(|r| r.bc_true.unwrap_or(f64::NAN)).collect();
    let bc_true = Estimate::from_sample(&truth);
    let per_method = |get: fn(&ReplicateRecord) -> Option<f64>, on: bool| -> Result<(Option<Estimate>, Option<Estimate>)> {
        if !on {
            return Ok((None, None));
        }
        let est: Vec<f64> = kept.iter().map(|r| get(r).unwrap_or(f64::NAN)).collect();
        Ok((Some(Estimate::from_sample(&est)), Some(paired_relative_bias(&est, &truth)?)))
    };
    let (bc_est_method1, rb_method1) = per_method(|r| r.penalty_method1, config.method1)?;
    let (bc_est_method2, rb_method2) = per_method(|r| r.penalty_method2, config.method2)?;
    let mut warnings = Vec::new();
    if n_discarded as f64 > DISCARD_WARNING_SHARE * records.len() as f64 {
        warnings.push(format!("{n_discarded} of {} replicates discarded", records.len()));
    }
    Ok(SimResult {
        bc_true,
        bc_est_method1,
        bc_est_method2,
        rb_method1,
        rb_method2,
        n_converged,
        n_discarded,
        warnings,
        records,
    })
}

/// Run all outer replicates and aggregate.
pub fn run_simulation(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    aggregate(config, run_all(config))
}

/// `BC_true` with its Monte Carlo standard error.
pub fn bc_true(config: &SimConfig) -> Result<Estimate> {
    Ok(run_simulation(config)?.bc_true)
}

/// Averaged penalty of one method (1 or 2) over the same replicates as `bc_true`.
pub fn bc_est(config: &SimConfig, method: u8) -> Result<Estimate> {
    let mut cfg = config.clone();
    match method {
        1 => cfg.method1 = true,
        2 => cfg.method2 = true,
        m => return Err(Error::Config(format!("unknown method {m}"))),
    }
    let r = run_simulation(&cfg)?;
    let est = if method == 1 { r.bc_est_method1 } else { r.bc_est_method2 };
    est.ok_or_else(|| Error::Config("method not evaluated".into()))
}
