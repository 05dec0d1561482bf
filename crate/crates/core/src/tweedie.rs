//! Tweedie compound Poisson-gamma density for `1 < p < 2`.
//!
//! With `λ = μ^(2-p) / (φ(2-p))`, `N ~ Poisson(λ)` and `Y | N=n` a sum of
//! `n` gamma variables with shape `(2-p)/(p-1)` and scale `φ(p-1)μ^(p-1)`,
//! the density factorizes as
//!
//! ```text
//! log f(y; μ, φ, p) = log a(y, φ, p) + (y·μ^(1-p)/(1-p) - μ^(2-p)/(2-p)) / φ
//! ```
//!
//! with `log a(0, φ, p) = 0` (point mass `exp(-λ)`). For `y > 0`, `a` is a
//! series over the Poisson count, summed outward from its largest term.

use crate::error::{Error, Result};

/// Terms smaller than this fraction of the largest term are dropped.
const REL_CUTOFF: f64 = 1e-12;
const MAX_TERMS: usize = 10_000;

/// `log a(y, φ, p)`, the part of the log-density that does not depend on `μ`.
pub fn log_normalizer(y: f64, phi: f64, p: f64) -> Result<f64> {
    Ok(normalizer_series(y, phi, p)?.0)
}

/// `∂ log a / ∂ log φ`.
pub fn log_normalizer_dlogphi(y: f64, phi: f64, p: f64) -> Result<f64> {
    let alpha = (2.0 - p) / (p - 1.0);
    Ok(-(alpha + 1.0) * normalizer_series(y, phi, p)?.1)
}

/// `log a` and the mean Poisson count under the series weights.
fn normalizer_series(y: f64, phi: f64, p: f64) -> Result<(f64, f64)> {
    if y == 0.0 {
        return Ok((0.0, 0.0));
    }
    let alpha = (2.0 - p) / (p - 1.0);
    // log W_n = n·z - lnΓ(n+1) - lnΓ(nα), a(y) = Σ W_n / y
    let z = alpha * (y / (phi * (p - 1.0))).ln() - (phi * (2.0 - p)).ln();
    let log_w = |n: f64| n * z - libm::lgamma(n + 1.0) - libm::lgamma(n * alpha);

    let peak = (y.powf(2.0 - p) / (phi * (2.0 - p))).round().max(1.0);
    let w_peak = log_w(peak);
    let mut terms = 1usize;
    let mut sum = 1.0; // relative to exp(w_peak)
    let mut moment = peak;

    let mut n = peak + 1.0;
    loop {
        let w = (log_w(n) - w_peak).exp();
        sum += w;
        moment += n * w;
        terms += 1;
        if w < REL_CUTOFF {
            break;
        }
        if terms >= MAX_TERMS {
            return Err(Error::SeriesNotConverged { y, phi, power: p, terms });
        }
        n += 1.0;
    }
    let mut n = peak - 1.0;
    while n >= 1.0 {
        let w = (log_w(n) - w_peak).exp();
        sum += w;
        moment += n * w;
        terms += 1;
        if w < REL_CUTOFF {
            break;
        }
        if terms >= MAX_TERMS {
            return Err(Error::SeriesNotConverged { y, phi, power: p, terms });
        }
        n -= 1.0;
    }
    let v = w_peak + sum.ln() - y.ln();
    if !v.is_finite() {
        return Err(Error::SeriesNotConverged { y, phi, power: p, terms });
    }
    Ok((v, moment / sum))
}

/// Log-density (or log point mass at zero) of the Tweedie distribution.
pub fn tweedie_log_density(y: f64, mu: f64, phi: f64, p: f64) -> Result<f64> {
    if !(y >= 0.0) || !(mu > 0.0) || !(phi > 0.0) || !(p > 1.0 && p < 2.0) {
        return Err(Error::InvalidParameter(format!(
            "tweedie density requires y >= 0, mu > 0, phi > 0, 1 < p < 2 (got y={y}, mu={mu}, phi={phi}, p={p})"
        )));
    }
    let exponent = (y * mu.powf(1.0 - p) / (1.0 - p) - mu.powf(2.0 - p) / (2.0 - p)) / phi;
    Ok(log_normalizer(y, phi, p)? + exponent)
}

/// Poisson rate of the compound representation.
pub fn poisson_rate(mu: f64, phi: f64, p: f64) -> f64 {
    mu.powf(2.0 - p) / (phi * (2.0 - p))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct compound-Poisson sum, independent of the factorized form.
    fn brute_force(y: f64, mu: f64, phi: f64, p: f64) -> f64 {
        let lambda = poisson_rate(mu, phi, p);
        let shape = (2.0 - p) / (p - 1.0);
        let scale = phi * (p - 1.0) * mu.powf(p - 1.0);
        let mut total = 0.0;
        for n in 1..400 {
            let n = n as f64;
            let log_pois = -lambda + n * lambda.ln() - libm::lgamma(n + 1.0);
            let a = n * shape;
            let log_gamma = (a - 1.0) * y.ln() - y / scale - libm::lgamma(a) - a * scale.ln();
            total += (log_pois + log_gamma).exp();
        }
        total.ln()
    }

    #[test]
    fn point_mass_at_zero() {
        let v = tweedie_log_density(0.0, 1.0, 0.3, 1.5).unwrap();
        assert!((v + 1.0 / (0.3 * 0.5)).abs() < 1e-12);
        assert!((v + 6.666_666_666_666_667).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_sum() {
        for &(y, mu, phi, p) in &[
            (0.5, 1.0, 0.3, 1.5),
            (2.3, 4.0, 0.5, 1.5),
            (0.01, 0.2, 0.3, 1.5),
            (15.0, 12.0, 0.3, 1.5),
            (1.0, 1.0, 1.0, 1.2),
            (3.0, 2.0, 0.7, 1.8),
        ] {
            let a = tweedie_log_density(y, mu, phi, p).unwrap();
            let b = brute_force(y, mu, phi, p);
            assert!((a - b).abs() < 1e-10, "y={y} mu={mu}: {a} vs {b}");
        }
    }

    #[test]
    fn rejects_bad_domain() {
        assert!(tweedie_log_density(-1.0, 1.0, 0.3, 1.5).is_err());
        assert!(tweedie_log_density(1.0, 1.0, 0.3, 2.0).is_err());
        assert!(tweedie_log_density(1.0, 1.0, 0.3, 1.0).is_err());
        assert!(tweedie_log_density(1.0, 0.0, 0.3, 1.5).is_err());
    }

    #[test]
    fn phi_derivative_matches_finite_difference() {
        for &(y, phi) in &[(0.5, 0.3), (7.0, 0.5), (0.02, 1.2)] {
            let h = 1e-5;
            let fd = (log_normalizer(y, phi * f64::exp(h), 1.5).unwrap()
                - log_normalizer(y, phi * f64::exp(-h), 1.5).unwrap())
                / (2.0 * h);
            let d = log_normalizer_dlogphi(y, phi, 1.5).unwrap();
            assert!((d - fd).abs() < 1e-6 * (1.0 + d.abs()), "{d} vs {fd}");
        }
    }

    #[test]
    fn large_observation_converges() {
        let v = tweedie_log_density(500.0, 400.0, 0.3, 1.5).unwrap();
        assert!(v.is_finite());
    }
}
