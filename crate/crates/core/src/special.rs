//! Scalar kernels that show up in every layer: log-sigmoid, log-cosh and
//! log-sum-exp, all written to stay finite for large arguments.

use std::f64::consts::LN_2;

/// `ln σ(x) = -ln(1 + e^{-x})`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln cosh(x)` as `|x| + ln(1 + e^{-2|x|}) - ln 2`, safe for any finite `x`.
#[inline]
pub fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalises log-weights in place into a probability vector.
pub fn normalize_log_weights(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_matches_naive_in_safe_range() {
        for &x in &[-20.0, -3.0, -0.5, 0.0, 0.7, 4.0, 30.0] {
            let naive = (1.0 / (1.0 + (-x as f64).exp())).ln();
            assert!((log_sigmoid(x) - naive).abs() < 1e-12, "x={x}");
        }
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }

    #[test]
    fn ln_cosh_is_overflow_safe() {
        assert!((ln_cosh(1.0) - 1.0f64.cosh().ln()).abs() < 1e-15);
        assert!((ln_cosh(-2.5) - 2.5f64.cosh().ln()).abs() < 1e-14);
        assert!((ln_cosh(1000.0) - (1000.0 - LN_2)).abs() < 1e-12);
        assert_eq!(ln_cosh(0.0), 0.0);
    }

    #[test]
    fn normalisation_handles_huge_offsets() {
        let mut w = [1000.0, 1000.0 + 2f64.ln()];
        normalize_log_weights(&mut w);
        // 1000 + ln 2 itself is only good to ~1e-13
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
    }
}
