//! SPD factorisation with a jitter ladder.
//!
//! Early E-steps can hand us precisions that are positive definite only up
//! to rounding. Before giving up we add `JITTER_START · mean(diag)` to the
//! diagonal and escalate by ×10 until `JITTER_MAX · mean(diag)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{CmnError, Result};

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    /// Number of jitter rungs climbed (0 when the plain factorisation worked).
    pub escalations: u32,
}

impl SpdFactor {
    pub fn new(matrix: &DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(CmnError::shape(format!(
                "cannot factor a {}x{} matrix",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if let Some(chol) = Cholesky::new(matrix.clone()) {
            return Ok(SpdFactor {
                chol,
                escalations: 0,
            });
        }
        let n = matrix.nrows();
        let min_diag = matrix.diagonal().iter().copied().fold(f64::INFINITY, f64::min);
        let mean_diag = matrix.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n.max(1) as f64;
        let scale = if mean_diag > 0.0 && mean_diag.is_finite() {
            mean_diag
        } else {
            1.0
        };
        let mut factor = JITTER_START;
        let mut escalations = 0;
        while factor <= JITTER_MAX * (1.0 + 1e-9) {
            escalations += 1;
            let mut jittered = matrix.clone();
            for i in 0..n {
                jittered[(i, i)] += factor * scale;
            }
            if let Some(chol) = Cholesky::new(jittered) {
                return Ok(SpdFactor { chol, escalations });
            }
            factor *= 10.0;
        }
        Err(CmnError::SingularPrecision { min_diag })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `ln det` of the factored matrix.
    pub fn ln_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    /// Inverse, symmetrised so downstream code can rely on exact symmetry.
    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// `Tr(A B)` for square matrices of equal size, without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Bias-padded copy `[x; 1]`.
pub fn pad_one(x: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(x.len() + 1);
    out.as_mut_slice()[..x.len()].copy_from_slice(x);
    out[x.len()] = 1.0;
    out
}

/// Cholesky of a small row-major SPD matrix into `lower`, using the same
/// jitter ladder as [`SpdFactor`]. Returns the number of escalations.
///
/// Hot loops call this on `h × h` blocks, where allocation would dominate.
pub fn cholesky_small(a: &[f64], n: usize, lower: &mut [f64]) -> Result<u32> {
    debug_assert!(a.len() >= n * n && lower.len() >= n * n);
    if try_cholesky(a, n, 0.0, lower) {
        return Ok(0);
    }
    let mean_diag = (0..n).map(|i| a[i * n + i].abs()).sum::<f64>() / n.max(1) as f64;
    let scale = if mean_diag > 0.0 && mean_diag.is_finite() {
        mean_diag
    } else {
        1.0
    };
    let mut factor = JITTER_START;
    let mut escalations = 0;
    while factor <= JITTER_MAX * (1.0 + 1e-9) {
        escalations += 1;
        if try_cholesky(a, n, factor * scale, lower) {
            return Ok(escalations);
        }
        factor *= 10.0;
    }
    let min_diag = (0..n).map(|i| a[i * n + i]).fold(f64::INFINITY, f64::min);
    Err(CmnError::SingularPrecision { min_diag })
}

fn try_cholesky(a: &[f64], n: usize, jitter: f64, l: &mut [f64]) -> bool {
    for j in 0..n {
        let mut s = a[j * n + j] + jitter;
        for k in 0..j {
            s -= l[j * n + k] * l[j * n + k];
        }
        if !(s > 0.0) || !s.is_finite() {
            return false;
        }
        let d = s.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
            l[j * n + i] = 0.0;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` in place for a factor from [`cholesky_small`].
pub fn cholesky_solve_small(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// `(L Lᵀ)⁻¹` into `out` (row-major, exactly symmetric). `work` needs `n²` entries.
pub fn cholesky_inverse_small(l: &[f64], n: usize, out: &mut [f64], work: &mut [f64]) {
    // work = L⁻¹, lower triangular
    for j in 0..n {
        for i in 0..n {
            if i < j {
                work[i * n + j] = 0.0;
                continue;
            }
            let mut s = if i == j { 1.0 } else { 0.0 };
            for k in j..i {
                s -= l[i * n + k] * work[k * n + j];
            }
            work[i * n + j] = s / l[i * n + i];
        }
    }
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += work[k * n + i] * work[k * n + j];
            }
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
}

/// `ln det(L Lᵀ)`.
pub fn cholesky_ln_det_small(l: &[f64], n: usize) -> f64 {
    2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>()
}
