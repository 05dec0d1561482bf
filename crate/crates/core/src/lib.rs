//! Mixed models with AR(1) year effects and year×age interactions, fitted
//! by Laplace-approximated maximum likelihood, with conditional AIC
//! penalties and a Monte Carlo harness for their bias.

pub mod ar1;
pub mod caic;
pub mod error;
pub mod derivatives;
pub mod estimation;
pub(crate) mod joint;
pub mod model;
pub mod remat;
pub mod simulation;
pub mod tweedie;

pub use error::{Error, Result};
pub use estimation::{fit, laplace_marginal, FitOptions, FitResult};
pub use model::{
    Dataset, Family, Link, ModelSpec, Observation, ParamKind, ParameterVector, RandomEffectVector,
    ReLayout, TrueProcess,
};
