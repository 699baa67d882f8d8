use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{CmnError, Result};
use crate::linalg::SpdFactor;

/// Matrix-Normal-Gamma over a linear map `A` (`h × (d+1)`) and diagonal
/// noise precisions `Σ⁻¹ = diag(σ⁻²)`.
///
/// `A | Σ⁻¹ ~ MN(M, Σ, V)` and `σᵢ⁻² ~ Gamma(a, bᵢ)` (shape/rate). The Gamma
/// shape is shared across rows; the rates are per row. The row covariance
/// is diagonal throughout so it is never stored densely.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixNormalGamma {
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub a: f64,
    pub b: DVector<f64>,
    v_inv: DMatrix<f64>,
}

impl MatrixNormalGamma {
    pub fn new(m: DMatrix<f64>, v: DMatrix<f64>, a: f64, b: DVector<f64>) -> Result<Self> {
        let v_inv = SpdFactor::new(&v)?.inverse();
        Self::from_parts(m, v, v_inv, a, b)
    }

    /// Builds from both `V` and `V⁻¹` when the caller already has them.
    pub(crate) fn from_parts(
        m: DMatrix<f64>,
        v: DMatrix<f64>,
        v_inv: DMatrix<f64>,
        a: f64,
        b: DVector<f64>,
    ) -> Result<Self> {
        let (h, cols) = m.shape();
        if v.shape() != (cols, cols) || v_inv.shape() != (cols, cols) {
            return Err(CmnError::shape(format!(
                "M is {h}x{cols} but V is {}x{}",
                v.nrows(),
                v.ncols()
            )));
        }
        if b.len() != h {
            return Err(CmnError::shape(format!(
                "M has {h} rows but b has length {}",
                b.len()
            )));
        }
        if !(a > 0.0) || b.iter().any(|&bi| !(bi > 0.0)) {
            return Err(CmnError::domain("Gamma shape and rates must be positive"));
        }
        Ok(MatrixNormalGamma { m, v, a, b, v_inv })
    }

    /// Zero-mean prior `MN(0, Σ, v₀I)` with `Gamma(a₀, b₀)` on every row.
    pub fn prior(h: usize, d: usize, v0: f64, a0: f64, b0: f64) -> Result<Self> {
        if !(v0 > 0.0) {
            return Err(CmnError::domain("v0 must be positive"));
        }
        let cols = d + 1;
        Self::from_parts(
            DMatrix::zeros(h, cols),
            DMatrix::identity(cols, cols) * v0,
            DMatrix::identity(cols, cols) / v0,
            a0,
            DVector::from_element(h, b0),
        )
    }

    pub fn output_dim(&self) -> usize {
        self.m.nrows()
    }

    /// Number of columns of `A`, i.e. the padded input dimension `d + 1`.
    pub fn input_dim(&self) -> usize {
        self.m.ncols()
    }

    pub fn v_inv(&self) -> &DMatrix<f64> {
        &self.v_inv
    }
}

/// Expected sufficient statistics of an MNG.
#[derive(Clone, Debug)]
pub struct MngExpectations {
    /// Diagonal of `E[Σ⁻¹]`.
    pub precision: DVector<f64>,
    /// `E[Σ⁻¹A]`.
    pub precision_mean: DMatrix<f64>,
    /// `E[AᵀΣ⁻¹A]`.
    pub quadratic: DMatrix<f64>,
    /// `E[ln det Σ⁻¹]`.
    pub ln_det_precision: f64,
}

pub fn mng_expectations(p: &MatrixNormalGamma) -> MngExpectations {
    let h = p.output_dim();
    let precision = p.b.map(|bi| p.a / bi);
    let precision_mean = DMatrix::from_fn(h, p.input_dim(), |i, j| precision[i] * p.m[(i, j)]);
    let mut quadratic = p.m.transpose() * &precision_mean;
    quadratic += &p.v * h as f64;
    crate::linalg::symmetrize(&mut quadratic);
    let psi_a = digamma(p.a);
    let ln_det_precision = p.b.iter().map(|bi| psi_a - bi.ln()).sum();
    MngExpectations {
        precision,
        precision_mean,
        quadratic,
        ln_det_precision,
    }
}

/// `KL[Gamma(a, b) || Gamma(a₀, b₀)]`, shape/rate parameterisation.
pub fn gamma_kl(a: f64, b: f64, a0: f64, b0: f64) -> f64 {
    (a - a0) * digamma(a) - ln_gamma(a) + ln_gamma(a0) + a0 * (b.ln() - b0.ln()) + a * (b0 - b) / b
}
