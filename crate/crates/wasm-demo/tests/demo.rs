use caic_wasm_demo::{ar1_path, fit_demo, tweedie_curve};

#[test]
fn tweedie_curve_carries_unit_mass_and_mean_mu() {
    let (mu, phi, p) = (2.0, 0.8, 1.5);
    let c = tweedie_curve(mu, phi, p, 30.0, 2000).unwrap();
    let h = c.y[0];
    // Riemann sum on the right endpoints; the density vanishes well before y_max.
    let mass: f64 = c.density.iter().map(|d| d * h).sum();
    let mean: f64 = c.y.iter().zip(&c.density).map(|(y, d)| y * d * h).sum();
    assert!((c.zero_mass + mass - 1.0).abs() < 5e-3, "{}", c.zero_mass + mass);
    assert!((mean - mu).abs() < 1e-2, "{mean}");
}

#[test]
fn ar1_path_autocorrelation_near_rho() {
    let x = ar1_path(10_000, 0.7, 3).unwrap();
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    let c1 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / n;
    assert!((v - 1.0).abs() < 0.1, "{v}");
    assert!((c1 / v - 0.7).abs() < 0.05, "{}", c1 / v);
}

#[test]
fn gaussian_fit_demo_reports_both_methods() {
    let r = fit_demo("gaussian", 8, 2, 0.5, 0.4, 1).unwrap();
    assert!(r.converged);
    // six age effects plus sigma, delta and sigma_e; rho only enters the prior
    assert_eq!(r.p_c, 9);
    assert_eq!(r.q, 8 + 8 * 6);
    assert!(r.method2_trace > 0.0 && r.method2_trace < r.q as f64);
    assert!(r.caic_method1.unwrap().is_finite());
    let json = serde_json::to_value(&r).unwrap();
    assert_eq!(json["family"], "gaussian");
}

#[test]
fn negbin_fit_demo_skips_method1() {
    let r = fit_demo("negbin", 8, 2, 0.2, 0.4, 2).unwrap();
    assert!(r.caic_method1.is_none());
    assert!(r.notes.iter().any(|n| n.contains("method 1")));
    assert!(fit_demo("gaussian", 1, 2, 0.5, 0.4, 2).is_err());
}
