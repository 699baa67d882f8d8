use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{CmnError, Result};
use crate::linalg::{symmetrize, SpdFactor};

/// Multivariate Gaussian in natural parameters: `λ₁ = Σ⁻¹μ`, `λ₂ = -½Σ⁻¹`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianNatural {
    pub lambda1: DVector<f64>,
    pub lambda2: DMatrix<f64>,
}

impl GaussianNatural {
    pub fn new(lambda1: DVector<f64>, lambda2: DMatrix<f64>) -> Result<Self> {
        let m = lambda1.len();
        if lambda2.shape() != (m, m) {
            return Err(CmnError::shape(format!(
                "lambda1 has length {m} but lambda2 is {}x{}",
                lambda2.nrows(),
                lambda2.ncols()
            )));
        }
        Ok(GaussianNatural { lambda1, lambda2 })
    }

    /// Zero-mean isotropic Gaussian `N(0, σ²I)`.
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        GaussianNatural {
            lambda1: DVector::zeros(dim),
            lambda2: DMatrix::identity(dim, dim) * (-0.5 / variance),
        }
    }

    pub fn from_moments(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let factor = SpdFactor::new(cov)?;
        let precision = factor.inverse();
        let lambda1 = &precision * mean;
        Ok(GaussianNatural {
            lambda1,
            lambda2: precision * -0.5,
        })
    }

    pub fn dim(&self) -> usize {
        self.lambda1.len()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        &self.lambda2 * -2.0
    }

    pub fn to_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        natural_to_moments(self)
    }
}

/// `(μ, Σ)` from natural parameters via an SPD factorisation of `-2λ₂`.
pub fn natural_to_moments(g: &GaussianNatural) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let factor = SpdFactor::new(&g.precision())?;
    let mean = factor.solve(&g.lambda1);
    let mut cov = factor.inverse();
    symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Differential entropy from `ln det Σ`.
pub fn gaussian_entropy(dim: usize, ln_det_cov: f64) -> f64 {
    0.5 * (dim as f64 * (1.0 + (2.0 * PI).ln()) + ln_det_cov)
}

/// `KL[N(μ, Σ) || N(0, σ²I)]`.
pub fn isotropic_gaussian_kl(mean: &DVector<f64>, cov: &DMatrix<f64>, prior_var: f64) -> Result<f64> {
    let dim = mean.len() as f64;
    let ln_det = SpdFactor::new(cov)?.ln_det();
    let kl = 0.5
        * ((cov.trace() + mean.norm_squared()) / prior_var - dim + dim * prior_var.ln() - ln_det);
    Ok(kl.max(0.0))
}
