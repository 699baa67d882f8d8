use nalgebra::{DMatrix, DVector};

use crate::error::{CmnError, Result};
use crate::special::log_sigmoid;

/// Regression weights for a stick-breaking categorical over `num_classes`
/// classes: one row of `m + 1` weights (bias last) per stick. The last
/// class carries no stick.
#[derive(Clone, Debug, PartialEq)]
pub struct StickBreakingCoefficients {
    pub beta: DMatrix<f64>,
    num_classes: usize,
}

impl StickBreakingCoefficients {
    pub fn new(beta: DMatrix<f64>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || beta.nrows() != num_classes - 1 {
            return Err(CmnError::shape(format!(
                "{} sticks cannot describe {num_classes} classes",
                beta.nrows()
            )));
        }
        if beta.ncols() == 0 {
            return Err(CmnError::shape("stick weights need at least the bias column"));
        }
        Ok(StickBreakingCoefficients { beta, num_classes })
    }

    pub fn zeros(num_classes: usize, input_dim: usize) -> Self {
        StickBreakingCoefficients {
            beta: DMatrix::zeros(num_classes.saturating_sub(1), input_dim + 1),
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.beta.ncols() - 1
    }
}

/// Class log-probabilities from the stick activations `ψ_k = β_k·[x;1]`.
///
/// `ln p_k = ln σ(ψ_k) + Σ_{j<k} ln σ(-ψ_j)`; the last class gets only the
/// running remainder.
pub fn stick_breaking_log_probs(psi: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(psi.len() + 1);
    let mut remainder = 0.0;
    for &p in psi {
        out.push(remainder + log_sigmoid(p));
        remainder += log_sigmoid(-p);
    }
    out.push(remainder);
    out
}

pub fn stick_breaking_probs(coeffs: &StickBreakingCoefficients, x: &[f64]) -> Result<DVector<f64>> {
    if x.len() != coeffs.input_dim() {
        return Err(CmnError::shape(format!(
            "input has length {} but coefficients expect {}",
            x.len(),
            coeffs.input_dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CmnError::domain("stick-breaking input must be finite"));
    }
    let m = x.len();
    let psi: Vec<f64> = (0..coeffs.beta.nrows())
        .map(|k| {
            let row = coeffs.beta.row(k);
            row.iter().take(m).zip(x).map(|(w, xi)| w * xi).sum::<f64>() + row[m]
        })
        .collect();
    let logp = stick_breaking_log_probs(&psi);
    Ok(DVector::from_iterator(logp.len(), logp.into_iter().map(f64::exp)))
}
