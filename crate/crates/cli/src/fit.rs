//! Single-dataset fit with cAIC by each applicable method.

use std::fmt::Write as _;
use std::path::Path;

use caic_core::caic::{caic_method1, caic_method2, small_sample_term, CaicReport};
use caic_core::derivatives::estimator_jacobians;
use caic_core::estimation::{fit, initial_parameters, FitResult};
use caic_core::model::{Dataset, ModelSpec};
use serde::Serialize;

use crate::config::FitSpecFile;
use crate::data::{extent, read_data_file};
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct FitRecord {
    pub spec: ModelSpec,
    pub n_observations: usize,
    pub converged: bool,
    pub outer_iterations: usize,
    pub gradient_norm: f64,
    pub at_boundary: bool,
    pub marginal_loglik: f64,
    /// Natural-scale estimates in θ order.
    pub parameters: Vec<(String, f64)>,
    pub report: CaicReport,
    pub notices: Vec<String>,
}

fn natural_parameters(f: &FitResult) -> Vec<(String, f64)> {
    let spec = &f.spec;
    let t = &f.theta_hat;
    let mut out: Vec<(String, f64)> = t
        .q
        .iter()
        .enumerate()
        .map(|(a, &v)| (format!("q[{}]", a + 1), v))
        .collect();
    if spec.random_effects {
        out.push(("sigma".into(), t.sigma()));
        out.push(("delta".into(), t.delta()));
        out.push(("rho".into(), t.rho()));
    }
    out.push((spec.family.dispersion_name().into(), t.dispersion()));
    if spec.estimate_power {
        out.push(("power".into(), t.power(spec)));
    }
    out
}

pub fn fit_dataset(data: &Dataset, spec: &ModelSpec, spec_file: &FitSpecFile) -> Result<FitRecord, CliError> {
    let start = initial_parameters(spec, data);
    let options = spec_file.fit.options_for(spec, start)?;
    let f = fit(data, spec, &options).map_err(|e| CliError::Numerical(format!("fit failed: {e}")))?;
    if !f.converged {
        return Err(CliError::Numerical(format!(
            "fit did not converge after {} outer iterations (projected gradient max-norm {:.3e})",
            f.outer_iterations, f.gradient_norm
        )));
    }
    let mut notices = Vec::new();
    let mut report = caic_method2(&f, data).map_err(|e| CliError::Numerical(format!("method 2: {e}")))?;
    if spec.family.is_continuous() {
        match estimator_jacobians(&f, data).and_then(|jac| caic_method1(&f, data, &jac)) {
            Ok(r1) => report = report.with_method1(r1.method1_penalty.unwrap_or(f64::NAN)),
            Err(e) => notices.push(format!("method 1 not evaluated: {e}")),
        }
    } else {
        notices.push(format!(
            "method 1 omitted: the {:?} density is not differentiable in y over its support",
            spec.family
        ));
    }
    match small_sample_term(&f, data) {
        Ok(v) => report.small_sample_term = Some(v),
        Err(e) => notices.push(format!("small-sample term not evaluated: {e}")),
    }
    if f.at_boundary() {
        notices.push("delta estimate is on the boundary; it is treated as fixed in the derivatives".into());
    }
    Ok(FitRecord {
        spec: spec.clone(),
        n_observations: data.len(),
        converged: f.converged,
        outer_iterations: f.outer_iterations,
        gradient_norm: f.gradient_norm,
        at_boundary: f.at_boundary(),
        marginal_loglik: f.marginal_loglik,
        parameters: natural_parameters(&f),
        report,
        notices,
    })
}

pub fn fit_files(data_path: &Path, spec_path: &Path) -> Result<FitRecord, CliError> {
    let spec_file = FitSpecFile::load(spec_path)?;
    let obs = read_data_file(data_path)?;
    let (years, ages, reps) = extent(&obs);
    let spec = spec_file.spec_for(years, ages, reps)?;
    let data = Dataset::new(&spec, obs).map_err(|e| CliError::Data(format!("{}: {e}", data_path.display())))?;
    fit_dataset(&data, &spec, &spec_file)
}

pub fn render(rec: &FitRecord) -> String {
    let s = &rec.spec;
    let r = &rec.report;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:?} family, {:?} link: {} years x {} ages, {} observations",
        s.family, s.link, s.n_years, s.n_ages, rec.n_observations
    );
    let _ = writeln!(
        out,
        "converged in {} outer iterations, gradient max-norm {:.2e}",
        rec.outer_iterations, rec.gradient_norm
    );
    let _ = writeln!(out, "marginal log-likelihood  {:.6}", rec.marginal_loglik);
    for (name, v) in &rec.parameters {
        let _ = writeln!(out, "  {name:<10} {v:>14.6}");
    }
    let _ = writeln!(out, "-2 l_c                   {:.6}", r.neg2_lc);
    let _ = writeln!(out, "p_c                      {}", r.p_c);
    let _ = writeln!(out, "q                        {}", r.q);
    let _ = writeln!(out, "trace                    {:.6}", r.method2_trace);
    let _ = writeln!(out, "cAIC method 2            {:.6}", r.caic_method2);
    if let Some(v) = r.caic_method1 {
        let _ = writeln!(out, "cAIC method 1            {v:.6}");
    }
    if let Some(v) = r.small_sample_term {
        let _ = writeln!(out, "small-sample term        {v:.6}");
    }
    for d in &r.diagnostics {
        let _ = writeln!(out, "diagnostic: {d}");
    }
    for n in &rec.notices {
        let _ = writeln!(out, "note: {n}");
    }
    out
}
