//! Experiment-grid and fit-spec files. TOML is the primary format; a file
//! ending in `.json` is read as the JSON mirror of the same schema.

use std::path::Path;

use caic_core::estimation::FitOptions;
use caic_core::model::{Family, Link, ModelSpec, ParamKind, ParameterVector};
use caic_core::simulation::{CovSource, SimConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Age effects of the simulation design, `(-2, -1, 0, 1, 2, 3)` for six ages.
pub fn default_age_effects(n_ages: usize) -> Vec<f64> {
    (0..n_ages).map(|a| a as f64 - 2.0).collect()
}

pub fn default_link(family: Family) -> Link {
    match family {
        Family::Gaussian => Link::Identity,
        _ => Link::Log,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    #[serde(default)]
    pub link: Option<Link>,
    #[serde(default)]
    pub n_years: Option<usize>,
    #[serde(default)]
    pub n_ages: Option<usize>,
    #[serde(default)]
    pub tweedie_power: Option<f64>,
    #[serde(default)]
    pub estimate_power: bool,
    #[serde(default)]
    pub random_effects: Option<bool>,
}

impl ModelSection {
    fn build(&self, n_years: usize, n_ages: usize, replicates: usize) -> Result<ModelSpec, CliError> {
        let mut spec = ModelSpec::new(
            self.family,
            self.link.unwrap_or_else(|| default_link(self.family)),
            n_years,
            n_ages,
            replicates,
        )
        .map_err(|e| CliError::Config(format!("model: {e}")))?;
        if let Some(p) = self.tweedie_power {
            spec.tweedie_power = Some(p);
        }
        spec.estimate_power = self.estimate_power;
        spec.random_effects = self.random_effects.unwrap_or(true);
        spec.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    #[serde(default)]
    pub q: Option<Vec<f64>>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub power: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRow {
    pub replicates: usize,
    pub dispersion: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub replicates: Vec<usize>,
    #[serde(default)]
    pub dispersion: Vec<f64>,
    #[serde(default)]
    pub delta: Vec<f64>,
    /// Explicit rows; mutually exclusive with the three lists.
    #[serde(default)]
    pub rows: Vec<GridRow>,
}

impl GridSection {
    /// Rows in table order: replicates, then dispersion, then δ varying fastest.
    pub fn expand(&self) -> Result<Vec<GridRow>, CliError> {
        let lists_used = !(self.replicates.is_empty() && self.dispersion.is_empty() && self.delta.is_empty());
        if lists_used && !self.rows.is_empty() {
            return Err(CliError::Config("grid: give either rows or the replicates/dispersion/delta lists, not both".into()));
        }
        let rows = if self.rows.is_empty() {
            let mut rows = Vec::new();
            for &n in &self.replicates {
                for &d in &self.dispersion {
                    for &delta in &self.delta {
                        rows.push(GridRow { replicates: n, dispersion: d, delta });
                    }
                }
            }
            rows
        } else {
            self.rows.clone()
        };
        if rows.is_empty() {
            return Err(CliError::Config("grid: no rows (empty grid)".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.replicates == 0 {
                return Err(CliError::Config(format!("grid row {}: replicates must be at least 1", i + 1)));
            }
            if !(r.dispersion > 0.0 && r.dispersion.is_finite()) {
                return Err(CliError::Config(format!("grid row {}: dispersion must be positive", i + 1)));
            }
            if !(r.delta > 0.0 && r.delta.is_finite()) {
                return Err(CliError::Config(format!("grid row {}: delta must be positive", i + 1)));
            }
        }
        Ok(rows)
    }
}

fn default_seed() -> u64 {
    1
}

fn default_methods() -> Vec<u8> {
    vec![2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub n_out: usize,
    pub n_inner: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<u8>,
    #[serde(default)]
    pub cov_source: CovSource,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub threads: Option<usize>,
}

/// Optimizer settings and natural-scale values of held parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    #[serde(default)]
    pub tol_inner: Option<f64>,
    #[serde(default)]
    pub tol_outer: Option<f64>,
    #[serde(default)]
    pub max_inner: Option<usize>,
    #[serde(default)]
    pub max_outer: Option<usize>,
    #[serde(default)]
    pub fixed: FixedValues,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedValues {
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub dispersion: Option<f64>,
    #[serde(default)]
    pub power: Option<f64>,
}

impl FitSection {
    fn base_options(&self) -> Result<FitOptions, CliError> {
        let mut o = FitOptions::default();
        if let Some(v) = self.tol_inner {
            o.tol_inner = v;
        }
        if let Some(v) = self.tol_outer {
            o.tol_outer = v;
        }
        if let Some(v) = self.max_inner {
            o.max_inner = v;
        }
        if let Some(v) = self.max_outer {
            o.max_outer = v;
        }
        o.validate().map_err(|e| CliError::Config(format!("fit: {e}")))?;
        Ok(o)
    }

    /// Options for one dataset. Held parameters override the moment-based start.
    pub fn options_for(&self, spec: &ModelSpec, start: ParameterVector) -> Result<FitOptions, CliError> {
        let o = self.base_options()?;
        let f = &self.fixed;
        let mut kinds = Vec::new();
        let mut start = start;
        let bad = |name: &str, v: f64| CliError::Config(format!("fit.fixed.{name}: invalid value {v}"));
        if let Some(v) = f.sigma {
            if !(v > 0.0) {
                return Err(bad("sigma", v));
            }
            start.log_sigma = v.ln();
            kinds.push(ParamKind::LogSigma);
        }
        if let Some(v) = f.delta {
            if !(v > 0.0) {
                return Err(bad("delta", v));
            }
            start.log_delta = v.ln();
            kinds.push(ParamKind::LogDelta);
        }
        if let Some(v) = f.rho {
            if !(v.abs() < 1.0) {
                return Err(bad("rho", v));
            }
            start.rho_transform = v.atanh();
            kinds.push(ParamKind::RhoRaw);
        }
        if let Some(v) = f.dispersion {
            if !(v > 0.0) {
                return Err(bad("dispersion", v));
            }
            start.dispersion_transform = v.ln();
            kinds.push(ParamKind::Dispersion);
        }
        if let Some(v) = f.power {
            if !spec.estimate_power {
                return Err(CliError::Config("fit.fixed.power: the power is only a parameter when model.estimate_power = true".into()));
            }
            start = start.with_power(v).map_err(|_| bad("power", v))?;
            kinds.push(ParamKind::Power);
        }
        if kinds.is_empty() {
            return Ok(o);
        }
        Ok(o.starting_at(start).fixing(kinds))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub model: ModelSection,
    #[serde(default)]
    pub truth: TruthSection,
    pub grid: GridSection,
    pub monte_carlo: MonteCarloSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpecFile {
    pub model: ModelSection,
    #[serde(default)]
    pub fit: FitSection,
}

/// A validated experiment: one simulation configuration per table row.
#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    pub family: Family,
    pub rows: Vec<GridRow>,
    pub configs: Vec<SimConfig>,
    pub threads: Option<usize>,
}

impl ExperimentGrid {
    pub fn from_file(file: &GridFile) -> Result<Self, CliError> {
        let m = &file.model;
        let n_years = m
            .n_years
            .ok_or_else(|| CliError::Config("model.n_years: missing".into()))?;
        let q = match (&file.truth.q, m.n_ages) {
            (Some(q), Some(a)) if q.len() != a => {
                return Err(CliError::Config(format!("truth.q: expected {a} values, got {}", q.len())))
            }
            (Some(q), _) => q.clone(),
            (None, a) => default_age_effects(a.unwrap_or(6)),
        };
        let sigma = file.truth.sigma.unwrap_or(1.0);
        let rho = file.truth.rho.unwrap_or(0.8);
        let mc = &file.monte_carlo;
        let (mut method1, mut method2) = (false, false);
        for &k in &mc.methods {
            match k {
                1 => method1 = true,
                2 => method2 = true,
                _ => return Err(CliError::Config(format!("monte_carlo.methods: unknown method {k}"))),
            }
        }
        if file.fit.fixed != FixedValues::default() {
            return Err(CliError::Config("fit.fixed: held parameters are not supported in simulation grids".into()));
        }
        let rows = file.grid.expand()?;
        let mut configs = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let spec = m.build(n_years, q.len(), row.replicates)?;
            let mut theta = ParameterVector::from_natural(q.clone(), sigma, row.delta, rho, row.dispersion)
                .map_err(|e| CliError::Config(format!("truth: {e}")))?;
            if spec.estimate_power {
                theta = theta
                    .with_power(file.truth.power.unwrap_or_else(|| spec.power()))
                    .map_err(|e| CliError::Config(format!("truth.power: {e}")))?;
            }
            let mut cfg = SimConfig::new(spec, theta, mc.n_out, mc.n_inner, row_seed(mc.seed, i));
            cfg.method1 = method1;
            cfg.method2 = method2;
            cfg.cov_source = mc.cov_source;
            cfg.fit_options = file.fit.base_options()?;
            cfg.validate()
                .map_err(|e| CliError::Config(format!("grid row {}: {e}", i + 1)))?;
            configs.push(cfg);
        }
        Ok(Self {
            family: m.family,
            rows,
            configs,
            threads: file.output.threads,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_file(&read_config(path)?)
    }

    /// Replace the base seed of every row.
    pub fn reseed(&mut self, seed: u64) {
        for (i, c) in self.configs.iter_mut().enumerate() {
            c.seed = row_seed(seed, i);
        }
    }
}

/// Seed of grid row `index`: rows get distinct, reproducible streams.
pub fn row_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

impl FitSpecFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_config(path)
    }

    /// Model specification for a dataset spanning `n_years × n_ages` cells
    /// with at most `replicates` observations per cell.
    pub fn spec_for(&self, n_years: usize, n_ages: usize, replicates: usize) -> Result<ModelSpec, CliError> {
        let years = self.model.n_years.unwrap_or(n_years);
        let ages = self.model.n_ages.unwrap_or(n_ages);
        if years < n_years || ages < n_ages {
            return Err(CliError::Config(format!(
                "model: data span {n_years} years and {n_ages} ages, more than the declared {years} × {ages}"
            )));
        }
        self.model.build(years, ages, replicates.max(1))
    }
}

pub fn parse_config<T: DeserializeOwned>(text: &str, json: bool) -> Result<T, CliError> {
    if json {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("JSON: {e}")))
    } else {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let json = path.extension().is_some_and(|x| x.eq_ignore_ascii_case("json"));
    parse_config(&text, json).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
