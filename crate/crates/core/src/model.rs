//! Model specification, parameterization and log-likelihood components.
//!
//! The linear predictor for year `t` and age `a` is
//! `η[t,a] = q[a] + σ·Ψ[t] + δ·Ψ[t,a]`, where the year effects follow a
//! stationary AR(1) process with unit marginal variance and the interaction
//! effects are iid standard normal. Observations are conditionally
//! independent given the random effects.

use serde::{Deserialize, Serialize};

use crate::ar1::Ar1Precision;
use crate::error::{Error, Result};
use crate::tweedie;
use statrs::function::gamma::digamma;

/// Bound applied to the linear predictor before any exponential.
pub const ETA_CLAMP: f64 = 30.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const DEFAULT_TWEEDIE_POWER: f64 = 1.5;

/// Relative step for power derivatives.
const POWER_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Gamma,
    #[serde(alias = "negative-binomial", alias = "nb")]
    NegBin,
    Tweedie,
}

impl Family {
    /// Whether the observation density is differentiable in `y` over its support.
    pub fn is_continuous(self) -> bool {
        matches!(self, Family::Gaussian | Family::Gamma)
    }

    pub fn dispersion_name(self) -> &'static str {
        match self {
            Family::Gaussian => "sigma_e",
            Family::Gamma => "shape",
            Family::NegBin => "alpha",
            Family::Tweedie => "phi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    Identity,
    Log,
    /// `0.5 + 1.5·exp(η)/(1+exp(η))`, applied to the gamma scale.
    ShiftedScaledLogit,
}

pub fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(-ETA_CLAMP, ETA_CLAMP)
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse link. For [`Link::ShiftedScaledLogit`] the result is the gamma scale, not the mean.
pub fn mean_from_linear_predictor(link: Link, eta: f64) -> f64 {
    match link {
        Link::Identity => eta,
        Link::Log => clamp_eta(eta).exp(),
        Link::ShiftedScaledLogit => 0.5 + 1.5 * logistic(eta),
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub link: Link,
    pub n_years: usize,
    pub n_ages: usize,
    /// Observations per (year, age) cell.
    pub replicates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tweedie_power: Option<f64>,
    /// Estimate the Tweedie power instead of holding it at `tweedie_power`.
    #[serde(default)]
    pub estimate_power: bool,
    /// `false` drops both random-effect blocks (q = 0).
    #[serde(default = "default_true")]
    pub random_effects: bool,
}

impl ModelSpec {
    pub fn new(
        family: Family,
        link: Link,
        n_years: usize,
        n_ages: usize,
        replicates: usize,
    ) -> Result<Self> {
        let spec = Self {
            family,
            link,
            n_years,
            n_ages,
            replicates,
            tweedie_power: (family == Family::Tweedie).then_some(DEFAULT_TWEEDIE_POWER),
            estimate_power: false,
            random_effects: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_tweedie_power(mut self, p: f64) -> Result<Self> {
        self.tweedie_power = Some(p);
        self.validate()?;
        Ok(self)
    }

    pub fn without_random_effects(mut self) -> Self {
        self.random_effects = false;
        self
    }

    pub fn with_replicates(mut self, replicates: usize) -> Result<Self> {
        self.replicates = replicates;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_years < 2 {
            return bad("n_years must be at least 2");
        }
        if self.n_ages < 1 {
            return bad("n_ages must be at least 1");
        }
        if self.replicates < 1 {
            return bad("replicates must be at least 1");
        }
        let link_ok = match self.family {
            Family::Gaussian => self.link == Link::Identity,
            Family::Gamma => matches!(self.link, Link::Log | Link::ShiftedScaledLogit),
            Family::NegBin | Family::Tweedie => self.link == Link::Log,
        };
        if !link_ok {
            return Err(Error::InvalidSpec(format!(
                "link {:?} is not supported for the {:?} family",
                self.link, self.family
            )));
        }
        match (self.family, self.tweedie_power) {
            (Family::Tweedie, Some(p)) if !(p > 1.0 && p < 2.0) => {
                return Err(Error::InvalidSpec(format!(
                    "tweedie_power must lie in (1, 2), got {p}"
                )))
            }
            (Family::Tweedie, _) => {}
            (_, Some(_)) => return bad("tweedie_power is only valid for the tweedie family"),
            (_, None) => {}
        }
        if self.estimate_power && self.family != Family::Tweedie {
            return bad("estimate_power is only valid for the tweedie family");
        }
        Ok(())
    }

    pub fn power(&self) -> f64 {
        self.tweedie_power.unwrap_or(DEFAULT_TWEEDIE_POWER)
    }

    pub fn param_layout(&self) -> ParamLayout {
        ParamLayout {
            n_ages: self.n_ages,
            has_power: self.family == Family::Tweedie && self.estimate_power,
        }
    }

    pub fn re_layout(&self) -> ReLayout {
        ReLayout::new(self.n_years, self.n_ages, self.random_effects)
    }

    /// Number of random effects.
    pub fn q(&self) -> usize {
        self.re_layout().len()
    }

    pub fn n_observations(&self) -> usize {
        self.n_years * self.n_ages * self.replicates
    }

    /// Parameter slots that enter the conditional log-likelihood.
    ///
    /// The autocorrelation enters only the random-effect density; σ and δ
    /// enter only when random effects are present.
    pub fn enters_conditional(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Q(_) | ParamKind::Dispersion | ParamKind::Power => true,
            ParamKind::LogSigma | ParamKind::LogDelta => self.random_effects,
            ParamKind::RhoRaw => false,
        }
    }

    fn check_indices(&self, t: usize, a: usize) -> Result<()> {
        if t >= self.n_years || a >= self.n_ages {
            return Err(Error::IndexOutOfRange {
                year: t,
                age: a,
                n_years: self.n_years,
                n_ages: self.n_ages,
            });
        }
        Ok(())
    }

    /// `η[t,a] = q[a] + σ·Ψ[t] + δ·Ψ[t,a]` (0-based indices).
    pub fn linear_predictor(
        &self,
        theta: &ParameterVector,
        psi: &RandomEffectVector,
        t: usize,
        a: usize,
    ) -> Result<f64> {
        self.check_indices(t, a)?;
        Ok(eta_unchecked(theta, psi, t, a))
    }

    pub fn log_cond_likelihood(
        &self,
        theta: &ParameterVector,
        psi: &RandomEffectVector,
        data: &Dataset,
    ) -> Result<f64> {
        let kernel = ObsKernel::new(self, theta)?;
        let mut total = 0.0;
        for (i, obs) in data.observations.iter().enumerate() {
            self.check_indices(obs.t, obs.a)?;
            let eta = eta_unchecked(theta, psi, obs.t, obs.a);
            let v = kernel.log_density(obs.y, eta).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite { index: i },
                other => other,
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            total += v;
        }
        Ok(total)
    }

    /// MVN log-density of the random effects.
    pub fn log_re_density(&self, theta: &ParameterVector, psi: &RandomEffectVector) -> Result<f64> {
        let rho = theta.rho();
        if !(rho.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!("|rho| must be < 1, got {rho}")));
        }
        Ok(log_re_density_unchecked(rho, psi))
    }

    pub fn log_joint(
        &self,
        theta: &ParameterVector,
        psi: &RandomEffectVector,
        data: &Dataset,
    ) -> Result<f64> {
        Ok(self.log_cond_likelihood(theta, psi, data)? + self.log_re_density(theta, psi)?)
    }

    /// Conditional mean and (diagonal) covariance of `y` given the random effects.
    pub fn cond_mean_cov(
        &self,
        theta: &ParameterVector,
        psi: &RandomEffectVector,
        data: &Dataset,
    ) -> Result<CondMoments> {
        let kernel = ObsKernel::new(self, theta)?;
        let (mean, variance) = data
            .observations
            .iter()
            .map(|o| kernel.mean_var(eta_unchecked(theta, psi, o.t, o.a)))
            .unzip();
        Ok(CondMoments { mean, variance })
    }
}

pub(crate) fn eta_unchecked(theta: &ParameterVector, psi: &RandomEffectVector, t: usize, a: usize) -> f64 {
    let mut eta = theta.q[a];
    if psi.layout.enabled {
        eta += theta.sigma() * psi.year(t) + theta.delta() * psi.interaction(t, a);
    }
    eta
}

pub(crate) fn log_re_density_unchecked(rho: f64, psi: &RandomEffectVector) -> f64 {
    let q = psi.layout.len();
    if q == 0 {
        return 0.0;
    }
    let ar = Ar1Precision::new(psi.year_effects.len(), rho);
    let ss: f64 = psi.interaction_effects.iter().map(|v| v * v).sum();
    -0.5 * q as f64 * LN_2PI + 0.5 * ar.log_det() - 0.5 * ar.quad_form(&psi.year_effects) - 0.5 * ss
}

/// Diagonal conditional moments of the observations.
#[derive(Debug, Clone, PartialEq)]
pub struct CondMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

// ---------------------------------------------------------------------------
// parameters

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Q(usize),
    LogSigma,
    LogDelta,
    RhoRaw,
    Dispersion,
    Power,
}

/// Flat ordering of θ: `[q_1..q_A, log σ, log δ, atanh ρ, log dispersion, (power)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_ages: usize,
    pub has_power: bool,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.n_ages + 4 + usize::from(self.has_power)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, kind: ParamKind) -> Option<usize> {
        let a = self.n_ages;
        match kind {
            ParamKind::Q(i) if i < a => Some(i),
            ParamKind::Q(_) => None,
            ParamKind::LogSigma => Some(a),
            ParamKind::LogDelta => Some(a + 1),
            ParamKind::RhoRaw => Some(a + 2),
            ParamKind::Dispersion => Some(a + 3),
            ParamKind::Power => self.has_power.then_some(a + 4),
        }
    }

    pub fn kind(&self, index: usize) -> ParamKind {
        let a = self.n_ages;
        match index {
            i if i < a => ParamKind::Q(i),
            i if i == a => ParamKind::LogSigma,
            i if i == a + 1 => ParamKind::LogDelta,
            i if i == a + 2 => ParamKind::RhoRaw,
            i if i == a + 3 => ParamKind::Dispersion,
            _ => ParamKind::Power,
        }
    }

    pub fn name(&self, index: usize, family: Family) -> String {
        match self.kind(index) {
            ParamKind::Q(i) => format!("q{}", i + 1),
            ParamKind::LogSigma => "log_sigma".into(),
            ParamKind::LogDelta => "log_delta".into(),
            ParamKind::RhoRaw => "atanh_rho".into(),
            ParamKind::Dispersion => format!("log_{}", family.dispersion_name()),
            ParamKind::Power => "logit_power".into(),
        }
    }
}

/// Fixed effects and transformed variance/dispersion parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub q: Vec<f64>,
    pub log_sigma: f64,
    pub log_delta: f64,
    /// `ρ = tanh(rho_transform)`.
    pub rho_transform: f64,
    /// Log of σ_e, the gamma shape, α or φ depending on the family.
    pub dispersion_transform: f64,
    /// `p = 1 + logistic(power_transform)` when the Tweedie power is estimated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_transform: Option<f64>,
}

impl ParameterVector {
    pub fn from_natural(q: Vec<f64>, sigma: f64, delta: f64, rho: f64, dispersion: f64) -> Result<Self> {
        for (name, v) in [("sigma", sigma), ("delta", delta), ("dispersion", dispersion)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(rho.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!("|rho| must be < 1, got {rho}")));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite fixed effect".into()));
        }
        Ok(Self {
            q,
            log_sigma: sigma.ln(),
            log_delta: delta.ln(),
            rho_transform: rho.atanh(),
            dispersion_transform: dispersion.ln(),
            power_transform: None,
        })
    }

    /// Attach an estimated Tweedie power `p ∈ (1, 2)`.
    pub fn with_power(mut self, p: f64) -> Result<Self> {
        if !(p > 1.0 && p < 2.0) {
            return Err(Error::InvalidParameter(format!("power must lie in (1, 2), got {p}")));
        }
        let u = p - 1.0;
        self.power_transform = Some((u / (1.0 - u)).ln());
        Ok(self)
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn delta(&self) -> f64 {
        self.log_delta.exp()
    }

    pub fn rho(&self) -> f64 {
        self.rho_transform.tanh()
    }

    pub fn dispersion(&self) -> f64 {
        self.dispersion_transform.exp()
    }

    pub fn power(&self, spec: &ModelSpec) -> f64 {
        match self.power_transform {
            Some(raw) => 1.0 + logistic(raw),
            None => spec.power(),
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.q.len() != spec.n_ages {
            return Err(Error::InvalidParameter(format!(
                "expected {} fixed effects, got {}",
                spec.n_ages,
                self.q.len()
            )));
        }
        if self.power_transform.is_some() != spec.param_layout().has_power {
            return Err(Error::InvalidParameter(
                "power parameter presence does not match the spec".into(),
            ));
        }
        let all_finite = self.to_flat().iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidParameter("non-finite parameter".into()));
        }
        if !(self.sigma() > 0.0 && self.delta() > 0.0 && self.dispersion() > 0.0) {
            return Err(Error::InvalidParameter("scale parameter underflowed".into()));
        }
        if self.dispersion().is_infinite() {
            return Err(Error::InvalidParameter("dispersion overflowed".into()));
        }
        if !(self.rho().abs() < 1.0) {
            return Err(Error::InvalidParameter("|rho| reached 1".into()));
        }
        if spec.family == Family::Tweedie {
            let p = self.power(spec);
            if !(p > 1.0 && p < 2.0) {
                return Err(Error::InvalidParameter(format!("power {p} outside (1, 2)")));
            }
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.q.clone();
        v.extend([
            self.log_sigma,
            self.log_delta,
            self.rho_transform,
            self.dispersion_transform,
        ]);
        v.extend(self.power_transform);
        v
    }

    pub fn from_flat(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        let layout = spec.param_layout();
        if flat.len() != layout.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameters, got {}",
                layout.len(),
                flat.len()
            )));
        }
        let a = spec.n_ages;
        Ok(Self {
            q: flat[..a].to_vec(),
            log_sigma: flat[a],
            log_delta: flat[a + 1],
            rho_transform: flat[a + 2],
            dispersion_transform: flat[a + 3],
            power_transform: layout.has_power.then(|| flat[a + 4]),
        })
    }
}

// ---------------------------------------------------------------------------
// random effects

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReSlot {
    Year(usize),
    Interaction(usize, usize),
}

/// Flat layout `[Ψ_1..Ψ_T, Ψ_{1,1}..Ψ_{1,A}, Ψ_{2,1}, .., Ψ_{T,A}]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReLayout {
    pub n_years: usize,
    pub n_ages: usize,
    pub enabled: bool,
}

impl ReLayout {
    pub fn new(n_years: usize, n_ages: usize, enabled: bool) -> Self {
        Self {
            n_years,
            n_ages,
            enabled,
        }
    }

    /// Number of year effects actually present.
    pub fn n_re_years(&self) -> usize {
        if self.enabled {
            self.n_years
        } else {
            0
        }
    }

    pub fn len(&self) -> usize {
        self.n_re_years() * (1 + self.n_ages)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn year_index(&self, t: usize) -> usize {
        t
    }

    pub fn interaction_index(&self, t: usize, a: usize) -> usize {
        self.n_re_years() + t * self.n_ages + a
    }

    pub fn locate(&self, index: usize) -> ReSlot {
        let t_years = self.n_re_years();
        if index < t_years {
            ReSlot::Year(index)
        } else {
            let k = index - t_years;
            ReSlot::Interaction(k / self.n_ages, k % self.n_ages)
        }
    }

    pub fn index_of(&self, slot: ReSlot) -> usize {
        match slot {
            ReSlot::Year(t) => self.year_index(t),
            ReSlot::Interaction(t, a) => self.interaction_index(t, a),
        }
    }

    /// Rows that may be nonzero in column `j` of a structured matrix.
    pub fn structural_neighbours(&self, j: usize) -> Vec<usize> {
        let t_years = self.n_re_years();
        let a = self.n_ages;
        match self.locate(j) {
            ReSlot::Year(t) => {
                let mut v = Vec::with_capacity(3 + a);
                if t > 0 {
                    v.push(t - 1);
                }
                v.push(t);
                if t + 1 < t_years {
                    v.push(t + 1);
                }
                v.extend((0..a).map(|k| self.interaction_index(t, k)));
                v
            }
            ReSlot::Interaction(t, _) => vec![t, j],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectVector {
    pub year_effects: Vec<f64>,
    /// Row-major `T×A`.
    pub interaction_effects: Vec<f64>,
    pub layout: ReLayout,
}

impl RandomEffectVector {
    pub fn zeros(layout: ReLayout) -> Self {
        let t = layout.n_re_years();
        Self {
            year_effects: vec![0.0; t],
            interaction_effects: vec![0.0; t * layout.n_ages],
            layout,
        }
    }

    pub fn from_flat(layout: ReLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} random effects, got {}",
                layout.len(),
                flat.len()
            )));
        }
        let t = layout.n_re_years();
        Ok(Self {
            year_effects: flat[..t].to_vec(),
            interaction_effects: flat[t..].to_vec(),
            layout,
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.year_effects.clone();
        v.extend_from_slice(&self.interaction_effects);
        v
    }

    pub fn year(&self, t: usize) -> f64 {
        self.year_effects[t]
    }

    pub fn interaction(&self, t: usize, a: usize) -> f64 {
        self.interaction_effects[t * self.layout.n_ages + a]
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// data

/// One observation; `t` and `a` are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: usize,
    pub a: usize,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub observations: Vec<Observation>,
}

impl Dataset {
    pub fn new(spec: &ModelSpec, observations: Vec<Observation>) -> Result<Self> {
        let ds = Self { observations };
        ds.validate(spec)?;
        Ok(ds)
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for (i, o) in self.observations.iter().enumerate() {
            let fail = |reason: &str| {
                Err(Error::InvalidData {
                    index: i,
                    reason: reason.to_string(),
                })
            };
            if o.t >= spec.n_years || o.a >= spec.n_ages {
                return fail(&format!("cell ({}, {}) outside the model grid", o.t, o.a));
            }
            if !o.y.is_finite() {
                return fail("non-finite response");
            }
            match spec.family {
                Family::Gaussian => {}
                Family::Gamma if o.y <= 0.0 => return fail("gamma responses must be positive"),
                Family::NegBin if o.y < 0.0 || o.y.fract() != 0.0 => {
                    return fail("negative binomial responses must be nonnegative integers")
                }
                Family::Tweedie if o.y < 0.0 => return fail("tweedie responses must be nonnegative"),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn responses(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.y).collect()
    }

    /// Same design with the responses replaced.
    pub fn with_responses(&self, y: &[f64]) -> Self {
        debug_assert_eq!(y.len(), self.len());
        Self {
            observations: self
                .observations
                .iter()
                .zip(y)
                .map(|(o, &y)| Observation { y, ..*o })
                .collect(),
        }
    }
}

/// Data-generating parameters and the realized random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueProcess {
    pub theta_o: ParameterVector,
    pub psi_o: RandomEffectVector,
}

// ---------------------------------------------------------------------------
// per-observation densities

/// Observation log-density in terms of the linear predictor, for one θ.
///
/// `log f(y | η) = log_norm(y) + eta_part(y, η)` where `log_norm` does not
/// depend on `η`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ObsKernel {
    pub family: Family,
    pub link: Link,
    /// Natural-scale dispersion: σ_e, gamma shape, α or φ.
    pub disp: f64,
    pub power: f64,
}

impl ObsKernel {
    pub fn new(spec: &ModelSpec, theta: &ParameterVector) -> Result<Self> {
        let disp = theta.dispersion();
        if !(disp > 0.0 && disp.is_finite()) {
            return Err(Error::InvalidParameter(format!("dispersion {disp}")));
        }
        Ok(Self {
            family: spec.family,
            link: spec.link,
            disp,
            power: theta.power(spec),
        })
    }

    pub fn log_norm(&self, y: f64) -> Result<f64> {
        let k = self.disp;
        Ok(match (self.family, self.link) {
            (Family::Gaussian, _) => -k.ln() - 0.5 * LN_2PI,
            (Family::Gamma, Link::Log) => -libm::lgamma(k) + k * k.ln() + (k - 1.0) * y.ln(),
            (Family::Gamma, _) => -libm::lgamma(k) + (k - 1.0) * y.ln(),
            (Family::NegBin, _) => {
                let r = 1.0 / k;
                libm::lgamma(y + r) - libm::lgamma(r) - libm::lgamma(y + 1.0) + r * r.ln()
            }
            (Family::Tweedie, _) => tweedie::log_normalizer(y, k, self.power)?,
        })
    }

    pub fn eta_part(&self, y: f64, eta: f64) -> f64 {
        let k = self.disp;
        match (self.family, self.link) {
            (Family::Gaussian, _) => {
                let r = (y - eta) / k;
                -0.5 * r * r
            }
            (Family::Gamma, Link::Log) => {
                let e = clamp_eta(eta);
                -k * e - k * y * (-e).exp()
            }
            (Family::Gamma, _) => {
                let s = mean_from_linear_predictor(Link::ShiftedScaledLogit, eta);
                -k * s.ln() - y / s
            }
            (Family::NegBin, _) => {
                let r = 1.0 / k;
                let e = clamp_eta(eta);
                -(r + y) * (r + e.exp()).ln() + y * e
            }
            (Family::Tweedie, _) => {
                let p = self.power;
                let e = clamp_eta(eta);
                (y * ((1.0 - p) * e).exp() / (1.0 - p) - ((2.0 - p) * e).exp() / (2.0 - p)) / k
            }
        }
    }

    pub fn log_density(&self, y: f64, eta: f64) -> Result<f64> {
        Ok(self.log_norm(y)? + self.eta_part(y, eta))
    }

    /// First and second derivatives of the log-density in `η`.
    pub fn eta_derivs(&self, y: f64, eta: f64) -> (f64, f64) {
        let k = self.disp;
        match (self.family, self.link) {
            (Family::Gaussian, _) => ((y - eta) / (k * k), -1.0 / (k * k)),
            (Family::Gamma, Link::Log) => {
                let w = k * y * (-clamp_eta(eta)).exp();
                (w - k, -w)
            }
            (Family::Gamma, _) => {
                let g = logistic(eta);
                let s = 0.5 + 1.5 * g;
                let ds = 1.5 * g * (1.0 - g);
                let d2s = ds * (1.0 - 2.0 * g);
                let ls = -k / s + y / (s * s);
                let lss = k / (s * s) - 2.0 * y / (s * s * s);
                (ls * ds, lss * ds * ds + ls * d2s)
            }
            (Family::NegBin, _) => {
                let r = 1.0 / k;
                let mu = clamp_eta(eta).exp();
                let d = r + mu;
                (y - (r + y) * mu / d, -(r + y) * r * mu / (d * d))
            }
            (Family::Tweedie, _) => {
                let p = self.power;
                let e = clamp_eta(eta);
                let a = y * ((1.0 - p) * e).exp();
                let b = ((2.0 - p) * e).exp();
                ((a - b) / k, ((1.0 - p) * a - (2.0 - p) * b) / k)
            }
        }
    }

    /// `∂² log f / ∂η ∂y`; continuous families only.
    pub fn d2_eta_y(&self, y: f64, eta: f64) -> f64 {
        let k = self.disp;
        match (self.family, self.link) {
            (Family::Gaussian, _) => 1.0 / (k * k),
            (Family::Gamma, Link::Log) => k * (-clamp_eta(eta)).exp(),
            (Family::Gamma, _) => {
                let g = logistic(eta);
                let s = 0.5 + 1.5 * g;
                1.5 * g * (1.0 - g) / (s * s)
            }
            _ => {
                let _ = y;
                f64::NAN
            }
        }
    }

    /// `∂² log f / ∂(log dispersion) ∂y`; continuous families only.
    pub fn d2_logdisp_y(&self, y: f64, eta: f64) -> f64 {
        let k = self.disp;
        match (self.family, self.link) {
            (Family::Gaussian, _) => 2.0 * (y - eta) / (k * k),
            (Family::Gamma, Link::Log) => k * (1.0 / y - (-clamp_eta(eta)).exp()),
            (Family::Gamma, _) => k / y,
            _ => f64::NAN,
        }
    }

    /// `∂ log f / ∂y`; continuous families only.
    pub fn d_y(&self, y: f64, eta: f64) -> f64 {
        let k = self.disp;
        match (self.family, self.link) {
            (Family::Gaussian, _) => (eta - y) / (k * k),
            (Family::Gamma, Link::Log) => -k * (-clamp_eta(eta)).exp() + (k - 1.0) / y,
            (Family::Gamma, _) => {
                let s = mean_from_linear_predictor(Link::ShiftedScaledLogit, eta);
                -1.0 / s + (k - 1.0) / y
            }
            _ => f64::NAN,
        }
    }

    /// `∂³ log f / ∂η³`.
    pub fn d3_eta(&self, y: f64, eta: f64) -> f64 {
        let k = self.disp;
        match (self.family, self.link) {
            (Family::Gaussian, _) => 0.0,
            (Family::Gamma, Link::Log) => k * y * (-clamp_eta(eta)).exp(),
            (Family::Gamma, _) => {
                let (s, s1, s2, s3) = ssl_scale_derivs(eta);
                let l1 = -k / s + y / (s * s);
                let l2 = k / (s * s) - 2.0 * y / (s * s * s);
                let l3 = -2.0 * k / (s * s * s) + 6.0 * y / (s * s * s * s);
                l3 * s1 * s1 * s1 + 3.0 * l2 * s1 * s2 + l1 * s3
            }
            (Family::NegBin, _) => {
                let r = 1.0 / k;
                let mu = clamp_eta(eta).exp();
                let d = r + mu;
                -(r + y) * r * mu * (r - mu) / (d * d * d)
            }
            (Family::Tweedie, _) => {
                let p = self.power;
                let e = clamp_eta(eta);
                let a = y * ((1.0 - p) * e).exp();
                let b = ((2.0 - p) * e).exp();
                ((1.0 - p) * (1.0 - p) * a - (2.0 - p) * (2.0 - p) * b) / k
            }
        }
    }

    /// `∂ log f / ∂ log(dispersion)`.
    pub fn d_logdisp(&self, y: f64, eta: f64) -> Result<f64> {
        let k = self.disp;
        Ok(match (self.family, self.link) {
            (Family::Gaussian, _) => {
                let r = (y - eta) / k;
                r * r - 1.0
            }
            (Family::Gamma, Link::Log) => {
                let e = clamp_eta(eta);
                k * (-digamma(k) + k.ln() + 1.0 + y.ln() - e - y * (-e).exp())
            }
            (Family::Gamma, _) => {
                let s = mean_from_linear_predictor(Link::ShiftedScaledLogit, eta);
                k * (-digamma(k) - s.ln() + y.ln())
            }
            (Family::NegBin, _) => {
                let r = 1.0 / k;
                let mu = clamp_eta(eta).exp();
                // ψ(y+r) - ψ(r) for integer y
                let psi_diff: f64 = (0..y as u64).map(|j| 1.0 / (r + j as f64)).sum();
                -r * (psi_diff + r.ln() + 1.0 - (r + mu).ln() - (r + y) / (r + mu))
            }
            (Family::Tweedie, _) => {
                tweedie::log_normalizer_dlogphi(y, k, self.power)? - self.eta_part(y, eta)
            }
        })
    }

    /// `∂² log f / ∂η ∂ log(dispersion)`.
    pub fn d_eta_logdisp(&self, y: f64, eta: f64) -> f64 {
        let k = self.disp;
        match (self.family, self.link) {
            (Family::Gaussian, _) => -2.0 * (y - eta) / (k * k),
            (Family::Gamma, Link::Log) => self.eta_derivs(y, eta).0,
            (Family::Gamma, _) => {
                let (s, s1, _, _) = ssl_scale_derivs(eta);
                -k * s1 / s
            }
            (Family::NegBin, _) => {
                let r = 1.0 / k;
                let mu = clamp_eta(eta).exp();
                r * mu * (mu - y) / ((r + mu) * (r + mu))
            }
            (Family::Tweedie, _) => -self.eta_derivs(y, eta).0,
        }
    }

    /// `∂³ log f / ∂η² ∂ log(dispersion)`.
    pub fn d2_eta_logdisp(&self, y: f64, eta: f64) -> f64 {
        let k = self.disp;
        match (self.family, self.link) {
            (Family::Gaussian, _) => 2.0 / (k * k),
            (Family::Gamma, Link::Log) => self.eta_derivs(y, eta).1,
            (Family::Gamma, _) => {
                let (s, s1, s2, _) = ssl_scale_derivs(eta);
                k * (s1 * s1 / (s * s) - s2 / s)
            }
            (Family::NegBin, _) => {
                let r = 1.0 / k;
                let mu = clamp_eta(eta).exp();
                let d = r + mu;
                let df_dr = mu * ((2.0 * r + y) / (d * d) - 2.0 * (r + y) * r / (d * d * d));
                r * df_dr
            }
            (Family::Tweedie, _) => -self.eta_derivs(y, eta).1,
        }
    }

    /// Derivatives of `(log f, ∂log f/∂η, ∂²log f/∂η²)` in the Tweedie power, by central differences.
    pub fn power_derivs(&self, y: f64, eta: f64) -> Result<(f64, f64, f64)> {
        let h = POWER_STEP * self.power;
        let up = ObsKernel { power: self.power + h, ..*self };
        let dn = ObsKernel { power: self.power - h, ..*self };
        let (g1, h1) = up.eta_derivs(y, eta);
        let (g0, h0) = dn.eta_derivs(y, eta);
        let l = (up.log_density(y, eta)? - dn.log_density(y, eta)?) / (2.0 * h);
        Ok((l, (g1 - g0) / (2.0 * h), (h1 - h0) / (2.0 * h)))
    }

    /// `∂³ log f / ∂η² ∂y`; continuous families only.
    pub fn d3_eta_eta_y(&self, _y: f64, eta: f64) -> f64 {
        let k = self.disp;
        match (self.family, self.link) {
            (Family::Gaussian, _) => 0.0,
            (Family::Gamma, Link::Log) => -k * (-clamp_eta(eta)).exp(),
            (Family::Gamma, _) => {
                let (s, s1, s2, _) = ssl_scale_derivs(eta);
                -2.0 * s1 * s1 / (s * s * s) + s2 / (s * s)
            }
            _ => f64::NAN,
        }
    }

    /// Conditional mean and variance given `η`.
    pub fn mean_var(&self, eta: f64) -> (f64, f64) {
        let k = self.disp;
        match (self.family, self.link) {
            (Family::Gaussian, _) => (eta, k * k),
            (Family::Gamma, Link::Log) => {
                let mu = clamp_eta(eta).exp();
                (mu, mu * mu / k)
            }
            (Family::Gamma, _) => {
                let s = mean_from_linear_predictor(Link::ShiftedScaledLogit, eta);
                (k * s, k * s * s)
            }
            (Family::NegBin, _) => {
                let mu = clamp_eta(eta).exp();
                (mu, mu + k * mu * mu)
            }
            (Family::Tweedie, _) => {
                let mu = clamp_eta(eta).exp();
                (mu, k * mu.powf(self.power))
            }
        }
    }
}

/// Scale of the shifted-scaled-logit link and its first three `η`-derivatives.
fn ssl_scale_derivs(eta: f64) -> (f64, f64, f64, f64) {
    let g = logistic(eta);
    let s1 = 1.5 * g * (1.0 - g);
    let s2 = s1 * (1.0 - 2.0 * g);
    let s3 = s1 * ((1.0 - 2.0 * g) * (1.0 - 2.0 * g) - 2.0 * g * (1.0 - g));
    (0.5 + 1.5 * g, s1, s2, s3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design_q() -> Vec<f64> {
        vec![-2.0, -1.0, 0.0, 1.0, 2.0, 3.0]
    }

    fn spec(family: Family, link: Link) -> ModelSpec {
        ModelSpec::new(family, link, 4, 6, 2).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(Family::Gaussian, Link::Identity, 1, 6, 3).is_err());
        assert!(ModelSpec::new(Family::Gaussian, Link::Identity, 2, 0, 3).is_err());
        assert!(ModelSpec::new(Family::Gaussian, Link::Identity, 2, 1, 0).is_err());
        assert!(ModelSpec::new(Family::Gaussian, Link::Log, 5, 6, 3).is_err());
        assert!(ModelSpec::new(Family::Tweedie, Link::Identity, 5, 6, 3).is_err());
        let tw = ModelSpec::new(Family::Tweedie, Link::Log, 5, 6, 3).unwrap();
        assert_eq!(tw.tweedie_power, Some(1.5));
        assert!(tw.clone().with_tweedie_power(2.0).is_err());
        assert!(tw.with_tweedie_power(1.0).is_err());
        assert!(ModelSpec::new(Family::Gamma, Link::ShiftedScaledLogit, 5, 6, 3).is_ok());
    }

    #[test]
    fn linear_predictor_examples() {
        let s = spec(Family::Gaussian, Link::Identity);
        let layout = s.re_layout();
        let zero = ParameterVector::from_natural(vec![0.0; 6], 1.0, 0.4, 0.0, 1.0).unwrap();
        let psi0 = RandomEffectVector::zeros(layout);
        assert_eq!(s.linear_predictor(&zero, &psi0, 2, 3).unwrap(), 0.0);

        // δ → 0 drops the interaction
        let mut theta = ParameterVector::from_natural(design_q(), 1.0, 1e-300, 0.0, 1.0).unwrap();
        theta.log_delta = f64::NEG_INFINITY;
        let mut psi = RandomEffectVector::zeros(layout);
        psi.year_effects[1] = 1.0;
        psi.interaction_effects[6 + 4] = 5.0;
        for a in 0..6 {
            assert_eq!(s.linear_predictor(&theta, &psi, 1, a).unwrap(), design_q()[a] + 1.0);
        }

        // q=(−2,...,3), σ=1, δ=0.4, Ψ_t=0.5, Ψ_{t,3}=−1 → 0.1 (age index 3 is 1-based)
        let theta = ParameterVector::from_natural(design_q(), 1.0, 0.4, 0.0, 1.0).unwrap();
        let mut psi = RandomEffectVector::zeros(layout);
        psi.year_effects[0] = 0.5;
        psi.interaction_effects[2] = -1.0;
        let eta = s.linear_predictor(&theta, &psi, 0, 2).unwrap();
        assert!((eta - 0.1).abs() < 1e-12);

        assert!(matches!(
            s.linear_predictor(&theta, &psi, 4, 0),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(s.linear_predictor(&theta, &psi, 0, 6).is_err());
    }

    #[test]
    fn inverse_links() {
        assert_eq!(mean_from_linear_predictor(Link::Log, 0.0), 1.0);
        assert_eq!(mean_from_linear_predictor(Link::Identity, 0.1), 0.1);
        let hi = mean_from_linear_predictor(Link::ShiftedScaledLogit, 1e6);
        let lo = mean_from_linear_predictor(Link::ShiftedScaledLogit, -1e6);
        assert!((hi - 2.0).abs() < 1e-15);
        assert!((lo - 0.5).abs() < 1e-15);
        assert!(mean_from_linear_predictor(Link::Log, 1e4).is_finite());
        assert_eq!(mean_from_linear_predictor(Link::Log, 1e4), 30f64.exp());
    }

    #[test]
    fn gaussian_density_peak() {
        let s = ModelSpec::new(Family::Gaussian, Link::Identity, 2, 1, 1).unwrap();
        let theta = ParameterVector::from_natural(vec![0.7], 1.0, 1.0, 0.0, 1.0).unwrap();
        let psi = RandomEffectVector::zeros(s.re_layout());
        let data = Dataset::new(&s, vec![Observation { t: 0, a: 0, y: 0.7 }]).unwrap();
        let lc = s.log_cond_likelihood(&theta, &psi, &data).unwrap();
        assert!((lc + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);

        // ρ=0, Ψ≡0, T=2, A=1: standard normal at the origin, q = 4
        let lr = s.log_re_density(&theta, &psi).unwrap();
        assert!((lr + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        let lj = s.log_joint(&theta, &psi, &data).unwrap();
        assert!((lj - (lc + lr)).abs() < 1e-14);
    }

    #[test]
    fn gamma_density_matches_closed_form() {
        let s = ModelSpec::new(Family::Gamma, Link::Log, 2, 1, 1).unwrap();
        let kernel = ObsKernel {
            family: Family::Gamma,
            link: Link::Log,
            disp: 3.0,
            power: 1.5,
        };
        let _ = s;
        // shape 3, mean 2 → scale 2/3; f(2) = 2² e^{-3} / (Γ(3) (2/3)³)
        let scale: f64 = 2.0 / 3.0;
        let reference = (4.0 * (-3.0f64).exp() / (2.0 * scale.powi(3))).ln();
        let v = kernel.log_density(2.0, 2f64.ln()).unwrap();
        assert!((v - reference).abs() < 1e-13, "{v} vs {reference}");
    }

    #[test]
    fn negbin_moments_and_normalization() {
        let kernel = ObsKernel {
            family: Family::NegBin,
            link: Link::Log,
            disp: 0.5,
            power: 1.5,
        };
        let eta = 2f64.ln();
        let (mean, var) = kernel.mean_var(eta);
        assert!((mean - 2.0).abs() < 1e-14);
        assert!((var - 4.0).abs() < 1e-14);
        let mut total = 0.0;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for y in 0..2000 {
            let p = kernel.log_density(y as f64, eta).unwrap().exp();
            total += p;
            m1 += p * y as f64;
            m2 += p * (y * y) as f64;
        }
        assert!((total - 1.0).abs() < 1e-12);
        assert!((m1 - 2.0).abs() < 1e-10);
        assert!((m2 - m1 * m1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn conditional_moments() {
        let s = ModelSpec::new(Family::Gaussian, Link::Identity, 3, 2, 1).unwrap();
        let theta = ParameterVector::from_natural(vec![0.0, 1.0], 1.0, 0.5, 0.3, 0.5).unwrap();
        let psi = RandomEffectVector::zeros(s.re_layout());
        let data = Dataset::new(
            &s,
            (0..3)
                .flat_map(|t| (0..2).map(move |a| Observation { t, a, y: 0.0 }))
                .collect(),
        )
        .unwrap();
        let m = s.cond_mean_cov(&theta, &psi, &data).unwrap();
        assert!(m.variance.iter().all(|v| (v - 0.25).abs() < 1e-15));

        let gamma = ObsKernel {
            family: Family::Gamma,
            link: Link::Log,
            disp: 3.0,
            power: 1.5,
        };
        let (mu, var) = gamma.mean_var(6f64.ln());
        assert!((mu - 6.0).abs() < 1e-12 && (var - 12.0).abs() < 1e-12);

        let tw = ObsKernel {
            family: Family::Tweedie,
            link: Link::Log,
            disp: 0.3,
            power: 1.5,
        };
        let (mu, var) = tw.mean_var(0.0);
        assert_eq!(mu, 1.0);
        assert!((var - 0.3).abs() < 1e-15);
    }

    #[test]
    fn layout_is_bijective() {
        let layout = ReLayout::new(5, 3, true);
        assert_eq!(layout.len(), 20);
        let mut seen = vec![false; layout.len()];
        for i in 0..layout.len() {
            let slot = layout.locate(i);
            assert_eq!(layout.index_of(slot), i);
            assert!(!seen[i]);
            seen[i] = true;
        }
        for t in 0..5 {
            assert_eq!(layout.locate(layout.year_index(t)), ReSlot::Year(t));
            for a in 0..3 {
                let idx = layout.interaction_index(t, a);
                assert_eq!(layout.locate(idx), ReSlot::Interaction(t, a));
            }
        }
    }

    #[test]
    fn parameter_round_trip() {
        let s = ModelSpec::new(Family::Tweedie, Link::Log, 3, 2, 1).unwrap();
        let mut s2 = s.clone();
        s2.estimate_power = true;
        let theta = ParameterVector::from_natural(vec![0.5, -0.5], 1.0, 0.4, 0.8, 0.3)
            .unwrap()
            .with_power(1.6)
            .unwrap();
        let back = ParameterVector::from_flat(&s2, &theta.to_flat()).unwrap();
        assert_eq!(back, theta);
        assert!((back.power(&s2) - 1.6).abs() < 1e-14);
        assert!(theta.validate(&s).is_err());
        assert!(theta.validate(&s2).is_ok());
        assert!((back.rho() - 0.8).abs() < 1e-14);
        assert!(ParameterVector::from_natural(vec![0.0], 1.0, 0.0, 0.0, 1.0).is_err());
        assert!(ParameterVector::from_natural(vec![0.0], 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn data_validation() {
        let g = ModelSpec::new(Family::Gamma, Link::Log, 2, 1, 1).unwrap();
        assert!(Dataset::new(&g, vec![Observation { t: 0, a: 0, y: 0.0 }]).is_err());
        let nb = ModelSpec::new(Family::NegBin, Link::Log, 2, 1, 1).unwrap();
        assert!(Dataset::new(&nb, vec![Observation { t: 0, a: 0, y: 1.5 }]).is_err());
        assert!(Dataset::new(&nb, vec![Observation { t: 0, a: 0, y: 3.0 }]).is_ok());
        let tw = ModelSpec::new(Family::Tweedie, Link::Log, 2, 1, 1).unwrap();
        assert!(Dataset::new(&tw, vec![Observation { t: 0, a: 0, y: 0.0 }]).is_ok());
        assert!(Dataset::new(&tw, vec![Observation { t: 2, a: 0, y: 0.0 }]).is_err());
    }

    #[test]
    fn spec_serde_round_trip() {
        let s = ModelSpec::new(Family::Gamma, Link::ShiftedScaledLogit, 10, 6, 3).unwrap();
        let text = toml::to_string(&s).unwrap();
        assert!(text.contains("shifted-scaled-logit"));
        let back: ModelSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    fn kernel(family: Family, link: Link, disp: f64) -> ObsKernel {
        ObsKernel { family, link, disp, power: 1.5 }
    }

    #[test]
    fn kernel_derivatives_match_finite_differences() {
        let h = 1e-5;
        let cases = [
            (Family::Gaussian, Link::Identity, 0.7, 1.3, 0.4),
            (Family::Gamma, Link::Log, 3.0, 2.1, 0.5),
            (Family::Gamma, Link::ShiftedScaledLogit, 5.0, 4.0, -0.3),
            (Family::NegBin, Link::Log, 0.2, 3.0, 0.8),
            (Family::Tweedie, Link::Log, 0.3, 1.7, 0.2),
        ];
        for &(family, link, disp, y, eta) in &cases {
            let k = kernel(family, link, disp);
            let f = |y: f64, e: f64| k.log_density(y, e).unwrap();
            let (d1, d2) = k.eta_derivs(y, eta);
            let fd1 = (f(y, eta + h) - f(y, eta - h)) / (2.0 * h);
            let fd2 = (k.eta_derivs(y, eta + h).0 - k.eta_derivs(y, eta - h).0) / (2.0 * h);
            assert!((d1 - fd1).abs() < 1e-6, "{family:?} d1 {d1} {fd1}");
            assert!((d2 - fd2).abs() < 1e-6, "{family:?} d2 {d2} {fd2}");
            let fd3 = (k.eta_derivs(y, eta + h).1 - k.eta_derivs(y, eta - h).1) / (2.0 * h);
            assert!((k.d3_eta(y, eta) - fd3).abs() < 1e-6, "{family:?} d3");
            let kd = |d: f64| ObsKernel { disp: d, ..k };
            let (up, dn) = (kd(disp * h.exp()), kd(disp * (-h).exp()));
            let fdl = (up.log_density(y, eta).unwrap() - dn.log_density(y, eta).unwrap()) / (2.0 * h);
            assert!((k.d_logdisp(y, eta).unwrap() - fdl).abs() < 1e-6, "{family:?} dlogdisp");
            let fdg = (up.eta_derivs(y, eta).0 - dn.eta_derivs(y, eta).0) / (2.0 * h);
            assert!((k.d_eta_logdisp(y, eta) - fdg).abs() < 1e-6, "{family:?} d_eta_logdisp");
            let fdh = (up.eta_derivs(y, eta).1 - dn.eta_derivs(y, eta).1) / (2.0 * h);
            assert!((k.d2_eta_logdisp(y, eta) - fdh).abs() < 1e-6, "{family:?} d2_eta_logdisp");
            if !family.is_continuous() {
                continue;
            }
            let fdy = (f(y + h, eta) - f(y - h, eta)) / (2.0 * h);
            assert!((k.d_y(y, eta) - fdy).abs() < 1e-6, "{family:?} dy");
            let fdey = (k.eta_derivs(y + h, eta).0 - k.eta_derivs(y - h, eta).0) / (2.0 * h);
            assert!((k.d2_eta_y(y, eta) - fdey).abs() < 1e-6, "{family:?} d2ey");
            let fdeey = (k.eta_derivs(y + h, eta).1 - k.eta_derivs(y - h, eta).1) / (2.0 * h);
            assert!((k.d3_eta_eta_y(y, eta) - fdeey).abs() < 1e-6, "{family:?} d3eey");
            let fdd = (kd(disp * h.exp()).d_y(y, eta) - kd(disp * (-h).exp()).d_y(y, eta)) / (2.0 * h);
            assert!((k.d2_logdisp_y(y, eta) - fdd).abs() < 1e-6, "{family:?} dispy");
        }
    }
}
