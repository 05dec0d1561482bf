use thiserror::Error;

use crate::model::Family;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data at observation {index}: {reason}")]
    InvalidData { index: usize, reason: String },

    #[error("index out of range: year {year} (of {n_years}), age {age} (of {n_ages})")]
    IndexOutOfRange {
        year: usize,
        age: usize,
        n_years: usize,
        n_ages: usize,
    },

    #[error("non-finite log-likelihood contribution at observation {index}")]
    NonFinite { index: usize },

    #[error("tweedie series did not converge after {terms} terms (y = {y}, phi = {phi}, p = {power})")]
    SeriesNotConverged {
        y: f64,
        phi: f64,
        power: f64,
        terms: usize,
    },

    #[error("inner Newton solve did not converge after {iterations} iterations (gradient max-norm {gradient_norm:e})")]
    InnerNotConverged {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("method unsupported for the {0:?} family")]
    UnsupportedFamily(Family),

    #[error("non-finite derivative at ({row}, {col})")]
    NonFiniteDerivative { row: usize, col: usize },

    #[error("fit did not converge")]
    NotConverged,

    #[error("estimate lies on a parameter boundary: {0}")]
    Boundary(String),

    #[error("relative bias undefined: true bias correction is zero")]
    ZeroBiasCorrection,

    #[error("no converged replicates out of {n_out}")]
    NoConvergedReplicates { n_out: usize },

    #[error("config error: {0}")]
    Config(String),
}
