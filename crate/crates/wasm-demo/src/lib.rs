//! Browser bindings over `caic-core`. Every export takes plain numbers and
//! returns a JSON string; the Rust-side functions are usable natively.

use caic_core::caic::{caic_method1, caic_method2};
use caic_core::derivatives::estimator_jacobians;
use caic_core::simulation::{draw_random_effects, sample_ar1, simulate_dataset};
use caic_core::tweedie::{poisson_rate, tweedie_log_density};
use caic_core::{fit, Family, FitOptions, Link, ModelSpec, ParameterVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_POINTS: usize = 2000;
const MAX_PATH: usize = 10_000;

#[derive(Debug, Clone, Serialize)]
pub struct DensityCurve {
    pub mu: f64,
    pub phi: f64,
    pub power: f64,
    /// `P(Y = 0)`.
    pub zero_mass: f64,
    pub y: Vec<f64>,
    pub density: Vec<f64>,
}

/// Tweedie density on `(0, y_max]` at `points` equally spaced abscissae.
pub fn tweedie_curve(mu: f64, phi: f64, power: f64, y_max: f64, points: usize) -> Result<DensityCurve, String> {
    if !(y_max > 0.0) || points == 0 || points > MAX_POINTS {
        return Err(format!("need y_max > 0 and 1..={MAX_POINTS} points"));
    }
    let step = y_max / points as f64;
    let y: Vec<f64> = (1..=points).map(|i| i as f64 * step).collect();
    let density = y
        .iter()
        .map(|&v| tweedie_log_density(v, mu, phi, power).map(f64::exp))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    Ok(DensityCurve {
        mu,
        phi,
        power,
        zero_mass: (-poisson_rate(mu, phi, power)).exp(),
        y,
        density,
    })
}

/// Stationary AR(1) path with unit marginal variance.
pub fn ar1_path(len: usize, rho: f64, seed: u64) -> Result<Vec<f64>, String> {
    if len == 0 || len > MAX_PATH {
        return Err(format!("path length must be in 1..={MAX_PATH}"));
    }
    if !(rho.abs() < 1.0) {
        return Err("rho must lie in (-1, 1)".into());
    }
    Ok(sample_ar1(len, rho, &mut ChaCha20Rng::seed_from_u64(seed)))
}

#[derive(Debug, Clone, Serialize)]
pub struct FitDemo {
    pub family: Family,
    pub n_years: usize,
    pub n_ages: usize,
    pub n_observations: usize,
    pub converged: bool,
    /// `(name, true value, estimate)` on the natural scale.
    pub parameters: Vec<(String, f64, f64)>,
    pub neg2_lc: f64,
    pub p_c: usize,
    pub q: usize,
    pub method2_trace: f64,
    pub caic_method2: f64,
    pub caic_method1: Option<f64>,
    pub notes: Vec<String>,
}

pub fn parse_family(name: &str) -> Result<Family, String> {
    serde_json::from_value(serde_json::Value::String(name.to_ascii_lowercase()))
        .map_err(|_| format!("unknown family '{name}' (gaussian, gamma, negbin, tweedie)"))
}

/// Simulates one dataset with six ages, fits it and evaluates cAIC.
pub fn fit_demo(
    family: &str,
    n_years: usize,
    replicates: usize,
    dispersion: f64,
    delta: f64,
    seed: u64,
) -> Result<FitDemo, String> {
    let family = parse_family(family)?;
    if !(2..=40).contains(&n_years) || !(1..=10).contains(&replicates) {
        return Err("years must be in 2..=40 and replicates in 1..=10".into());
    }
    let link = if family == Family::Gaussian { Link::Identity } else { Link::Log };
    let spec = ModelSpec::new(family, link, n_years, 6, replicates).map_err(|e| e.to_string())?;
    let q: Vec<f64> = (0..6).map(|a| a as f64 - 2.0).collect();
    let truth = ParameterVector::from_natural(q, 1.0, delta, 0.8, dispersion).map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let psi = draw_random_effects(&spec, &truth, &mut rng);
    let data = simulate_dataset(&spec, &truth, &psi, &mut rng).map_err(|e| e.to_string())?;

    let f = fit(&data, &spec, &FitOptions::default()).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    if !f.converged {
        notes.push("fit did not converge; values are from the last iterate".into());
    }
    let mut report = caic_method2(&f, &data).map_err(|e| e.to_string())?;
    if family.is_continuous() {
        match estimator_jacobians(&f, &data).and_then(|jac| caic_method1(&f, &data, &jac)) {
            Ok(r1) => report = report.with_method1(r1.method1_penalty.unwrap_or(f64::NAN)),
            Err(e) => notes.push(format!("method 1 not evaluated: {e}")),
        }
    } else {
        notes.push("method 1 needs a density differentiable in y; evaluated for gaussian and gamma only".into());
    }
    notes.extend(report.diagnostics.iter().cloned());

    let est = &f.theta_hat;
    let mut parameters: Vec<(String, f64, f64)> = truth
        .q
        .iter()
        .zip(&est.q)
        .enumerate()
        .map(|(a, (&t, &e))| (format!("q[{}]", a + 1), t, e))
        .collect();
    parameters.push(("sigma".into(), truth.sigma(), est.sigma()));
    parameters.push(("delta".into(), truth.delta(), est.delta()));
    parameters.push(("rho".into(), truth.rho(), est.rho()));
    parameters.push((family.dispersion_name().into(), truth.dispersion(), est.dispersion()));

    Ok(FitDemo {
        family,
        n_years,
        n_ages: 6,
        n_observations: data.len(),
        converged: f.converged,
        parameters,
        neg2_lc: report.neg2_lc,
        p_c: report.p_c,
        q: report.q,
        method2_trace: report.method2_trace,
        caic_method2: report.caic_method2,
        caic_method1: report.caic_method1,
        notes,
    })
}

fn to_json<T: Serialize>(v: Result<T, String>) -> Result<String, String> {
    v.and_then(|x| serde_json::to_string(&x).map_err(|e| e.to_string()))
}

#[wasm_bindgen(js_name = tweedieCurve)]
pub fn tweedie_curve_js(mu: f64, phi: f64, power: f64, y_max: f64, points: usize) -> Result<String, String> {
    to_json(tweedie_curve(mu, phi, power, y_max, points))
}

#[wasm_bindgen(js_name = ar1Path)]
pub fn ar1_path_js(len: usize, rho: f64, seed: u32) -> Result<String, String> {
    to_json(ar1_path(len, rho, seed as u64))
}

#[wasm_bindgen(js_name = fitDemo)]
pub fn fit_demo_js(
    family: &str,
    n_years: usize,
    replicates: usize,
    dispersion: f64,
    delta: f64,
    seed: u32,
) -> Result<String, String> {
    to_json(fit_demo(family, n_years, replicates, dispersion, delta, seed as u64))
}
