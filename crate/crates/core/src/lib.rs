//! Coordinate ascent variational inference for two-layer conditional
//! mixture networks.
//!
//! The network maps an input `x₀` through a stick-breaking gating network to
//! one of `K` linear experts, producing a continuous latent `x₁`, which a
//! second stick-breaking logistic layer maps to a class label. Both logistic
//! layers are made conditionally conjugate with Pólya-Gamma augmentation and
//! the experts carry Matrix-Normal-Gamma posteriors, so every update in a
//! sweep is closed form.

pub mod cmn;
pub mod data;
pub mod distributions;
pub mod error;
pub mod experiment;
pub mod experts;
pub mod linalg;
pub mod metrics;
pub mod mnlr;
pub mod seeds;
pub mod special;

pub use cmn::{
    e_step, elbo, elbo_terms, fit, fit_from, init_posterior, load_posterior, m_step, predict, save_posterior, CmnModel,
    CmnPosterior, ElboTerms, FitConfig, FitTrace, Hyperparameters, PosteriorFile, PredictiveSampler,
};
pub use data::{Dataset, PinwheelParams, Standardization};
pub use distributions::{GaussianNatural, MatrixNormalGamma, PGState, StickBreakingCoefficients};
pub use error::{CmnError, Result};
pub use experiment::{run_experiment, ExperimentConfig, ResultsRecord};
pub use metrics::{ConvergenceEstimate, MetricsReport, PointwiseLogLik, PredictionSet};
