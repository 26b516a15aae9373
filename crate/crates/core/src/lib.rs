//! Quasi-Bayes estimation of latent distributions from contaminated
//! observations.
//!
//! Candidate latent distributions are Gaussian mixtures under a truncated
//! Dirichlet-process prior. They are scored by characteristic-function
//! matching objectives for three observation models (classical measurement
//! error, repeated measurements, linear multi-factor) and sampled with a
//! gradient-based No-U-Turn sampler. Posterior draws are turned into mean
//! densities, credible bands and error metrics.

pub mod diagnostics;
pub mod ecf;
pub mod error;
pub mod likelihood;
pub mod mixture;
pub mod pipeline;
pub mod posterior;
pub mod prior;
pub mod quadrature;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
pub use mixture::MixtureParams;
pub use prior::{CovariancePrior, PriorSpec, UnconstrainedState};
