//! Moments and KL of the tilted Pólya-Gamma distribution `PG(b, ξ)`.
//!
//! Only these two quantities are ever needed: the Gaussian updates consume
//! `E[ω]` and the bound consumes `KL[PG(b, ξ) || PG(b, 0)]`.

use crate::error::{CmnError, Result};
use crate::special::ln_cosh;

/// Below this tilt `E[ω]` switches to its Taylor series `b/4·(1 - ξ²/12)`.
pub const PG_SERIES_THRESHOLD: f64 = 1e-4;

fn check(b_shape: f64, xi: f64) -> Result<()> {
    if !(b_shape >= 0.0) || !(xi >= 0.0) {
        return Err(CmnError::domain(format!(
            "Pólya-Gamma parameters must be nonnegative (b = {b_shape}, xi = {xi})"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn pg_mean_unchecked(b_shape: f64, xi: f64) -> f64 {
    if xi < PG_SERIES_THRESHOLD {
        0.25 * b_shape * (1.0 - xi * xi / 12.0)
    } else {
        b_shape / (2.0 * xi) * (0.5 * xi).tanh()
    }
}

#[inline]
pub(crate) fn pg_kl_unchecked(b_shape: f64, xi: f64) -> f64 {
    if b_shape == 0.0 {
        return 0.0;
    }
    let kl = -0.25 * b_shape * xi * (0.5 * xi).tanh() + b_shape * ln_cosh(0.5 * xi);
    kl.max(0.0)
}

/// `E[ω]` for `ω ~ PG(b, ξ)`: `b/(2ξ)·tanh(ξ/2)`, continuous through `ξ = 0`.
pub fn pg_mean(b_shape: f64, xi: f64) -> Result<f64> {
    check(b_shape, xi)?;
    Ok(pg_mean_unchecked(b_shape, xi))
}

/// `KL[PG(b, ξ) || PG(b, 0)] = -(bξ/4)tanh(ξ/2) + b·ln cosh(ξ/2)`.
pub fn pg_kl(b_shape: f64, xi: f64) -> Result<f64> {
    check(b_shape, xi)?;
    Ok(pg_kl_unchecked(b_shape, xi))
}

/// Augmentation state for one datapoint and one stick.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PGState {
    pub b_shape: f64,
    pub xi: f64,
    pub kappa: f64,
}

impl PGState {
    pub fn mean_omega(&self) -> f64 {
        pg_mean_unchecked(self.b_shape, self.xi)
    }

    pub fn kl(&self) -> f64 {
        pg_kl_unchecked(self.b_shape, self.xi)
    }
}

/// Stick coefficients for a label, 0-based: `label` in `0..num_classes`.
///
/// Returns `(κ, b)` of length `num_classes - 1` with `b_k = 1` for sticks at
/// or before the label and `κ_k = δ_{k,label} - b_k/2`.
pub fn kappa_vector(label: usize, num_classes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if num_classes == 0 || label >= num_classes {
        return Err(CmnError::domain(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    let sticks = num_classes - 1;
    let mut kappa = vec![0.0; sticks];
    let mut b = vec![0.0; sticks];
    for k in 0..sticks.min(label + 1) {
        b[k] = 1.0;
        kappa[k] = if k == label { 0.5 } else { -0.5 };
    }
    Ok((kappa, b))
}
