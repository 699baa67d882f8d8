//! Exponential-family building blocks shared by every layer of the network.

mod gaussian;
mod mng;
pub(crate) mod polya_gamma;
mod stick;

pub use gaussian::{gaussian_entropy, isotropic_gaussian_kl, natural_to_moments, GaussianNatural};
pub use mng::{gamma_kl, mng_expectations, MatrixNormalGamma, MngExpectations};
pub use polya_gamma::{kappa_vector, pg_kl, pg_mean, PGState, PG_SERIES_THRESHOLD};
pub use stick::{stick_breaking_log_probs, stick_breaking_probs, StickBreakingCoefficients};
