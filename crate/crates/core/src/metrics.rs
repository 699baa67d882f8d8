//! Predictive metrics and the convergence-step estimator.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CmnError, Result};
use crate::special::log_sum_exp;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Predictive simplexes for labelled points.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `N × L`
    pub probs: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if probs.nrows() != labels.len() {
            return Err(CmnError::shape("one probability row per label is required"));
        }
        for (n, row) in probs.row_iter().enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-8 || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(CmnError::domain(format!("row {n} is not a probability vector (sum {total})")));
            }
            if labels[n] >= probs.ncols() {
                return Err(CmnError::domain(format!("row {n}: label {} out of range", labels[n])));
            }
        }
        Ok(PredictionSet { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predicted(&self, n: usize) -> usize {
        let row = self.probs.row(n);
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        best
    }
}

/// `S × N` log-likelihoods `ln p(yₙ | θₛ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseLogLik {
    pub ll: DMatrix<f64>,
}

impl PointwiseLogLik {
    pub fn new(ll: DMatrix<f64>) -> Result<Self> {
        if ll.iter().any(|v| !v.is_finite()) {
            return Err(CmnError::domain("pointwise log-likelihoods must be finite"));
        }
        Ok(PointwiseLogLik { ll })
    }
}

fn require_nonempty(p: &PredictionSet) -> Result<()> {
    if p.is_empty() {
        Err(CmnError::domain("metrics need at least one prediction"))
    } else {
        Ok(())
    }
}

pub fn accuracy(p: &PredictionSet) -> Result<f64> {
    require_nonempty(p)?;
    let correct = (0..p.len()).filter(|&n| p.predicted(n) == p.labels[n]).count();
    Ok(correct as f64 / p.len() as f64)
}

/// Mean log probability of the true label.
pub fn lpd(p: &PredictionSet) -> Result<f64> {
    require_nonempty(p)?;
    let total: f64 = (0..p.len()).map(|n| p.probs[(n, p.labels[n])].max(PROB_FLOOR).ln()).sum();
    Ok(total / p.len() as f64)
}

/// Top-label expected calibration error over equal-width bins on `(0, 1]`.
pub fn ece(p: &PredictionSet, num_bins: usize) -> Result<f64> {
    if num_bins < 1 {
        return Err(CmnError::domain("ECE needs at least one bin"));
    }
    require_nonempty(p)?;
    let mut count = vec![0usize; num_bins];
    let mut conf = vec![0.0; num_bins];
    let mut hits = vec![0.0; num_bins];
    for n in 0..p.len() {
        let c = p.predicted(n);
        let confidence = p.probs[(n, c)];
        let bin = ((confidence * num_bins as f64).ceil() as usize).clamp(1, num_bins) - 1;
        count[bin] += 1;
        conf[bin] += confidence;
        if c == p.labels[n] {
            hits[bin] += 1.0;
        }
    }
    let total = p.len() as f64;
    Ok((0..num_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            nb / total * (hits[b] / nb - conf[b] / nb).abs()
        })
        .sum())
}

/// WAIC per datapoint: `(1/N) Σₙ [ln mean_s e^{llₛₙ} - Var_s(llₛₙ)]`, with the
/// unbiased variance (zero when `S = 1`).
pub fn waic(ll: &PointwiseLogLik) -> f64 {
    let (s, n) = ll.ll.shape();
    if n == 0 {
        return 0.0;
    }
    let ln_s = (s as f64).ln();
    let mut total = 0.0;
    for col in ll.ll.column_iter() {
        let values: Vec<f64> = col.iter().copied().collect();
        let lppd = log_sum_exp(&values) - ln_s;
        let penalty = if s > 1 {
            let mean = values.iter().sum::<f64>() / s as f64;
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (s - 1) as f64
        } else {
            0.0
        };
        total += lppd - penalty;
    }
    total / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub lpd: f64,
    pub ece: f64,
    pub waic: f64,
}

impl MetricsReport {
    pub fn compute(p: &PredictionSet, ll: &PointwiseLogLik, num_bins: usize) -> Result<Self> {
        Ok(MetricsReport {
            accuracy: accuracy(p)?,
            lpd: lpd(p)?,
            ece: ece(p, num_bins)?,
            waic: waic(ll),
        })
    }
}

/// Result of [`steps_to_converge`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceEstimate {
    /// `⌈τ ln 20⌉`, or the trace length when no decay was found.
    pub steps: usize,
    /// False when the fitted amplitude is not positive.
    pub decaying: bool,
    pub tau: f64,
}

const LN_20: f64 = 2.995_732_273_553_991;

/// Fits `c + A·exp(-t/τ)` to the negated trace (`t = 0, 1, …`) and returns
/// the step where 95% of the decay has happened.
pub fn steps_to_converge(trace: &[f64]) -> Result<ConvergenceEstimate> {
    let len = trace.len();
    if len < 3 {
        return Err(CmnError::domain("need at least three trace values"));
    }
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(CmnError::domain("trace contains non-finite values"));
    }
    let flagged = ConvergenceEstimate {
        steps: len,
        decaying: false,
        tau: f64::INFINITY,
    };
    // negate and rescale to [0, 1] so the fit is affine invariant
    let hi = trace.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = trace.iter().copied().fold(f64::INFINITY, f64::min);
    let range = hi - lo;
    if !(range > 0.0) {
        return Ok(flagged);
    }
    let y: Vec<f64> = trace.iter().map(|v| (hi - v) / range).collect();
    let Some((_, a, rate)) = fit_exponential(&y) else {
        return Ok(flagged);
    };
    if !(a > 0.0) || !(rate > 0.0) || !rate.is_finite() {
        return Ok(flagged);
    }
    let tau = 1.0 / rate;
    let steps = (tau * LN_20).ceil();
    Ok(ConvergenceEstimate {
        steps: if steps.is_finite() && steps >= 0.0 { steps as usize } else { len },
        decaying: true,
        tau,
    })
}

fn exp_residuals(y: &[f64], p: &Vector3<f64>) -> f64 {
    y.iter()
        .enumerate()
        .map(|(t, &v)| {
            let r = v - (p[0] + p[1] * (-p[2] * t as f64).exp());
            r * r
        })
        .sum()
}

/// Log-linear start: offset just below the tail, then a straight line
/// through `ln(y - c)` over the points that are still clearly above it.
fn initial_guess(y: &[f64]) -> Option<Vector3<f64>> {
    let n = y.len();
    let tail = n.div_ceil(10).max(1);
    let floor = y[n - tail..].iter().copied().fold(f64::INFINITY, f64::min);
    let head = y[0];
    let span = head - floor;
    if !(span.abs() > 0.0) {
        return None;
    }
    let c = floor - 0.01 * span.abs();
    let pts: Vec<(f64, f64)> = y
        .iter()
        .enumerate()
        .filter(|(_, &v)| (v - c) > 0.1 * (head - c).abs() && (v - c) > 0.0)
        .map(|(t, &v)| (t as f64, (v - c).ln()))
        .collect();
    if pts.len() < 2 {
        return Some(Vector3::new(c, head - c, 1.0 / n as f64));
    }
    let m = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { -1.0 / n as f64 };
    let rate = if slope < 0.0 { -slope } else { 1.0 / n as f64 };
    Some(Vector3::new(c, (ml - slope * mt).exp(), rate))
}

/// Levenberg–Marquardt on `(c, A, 1/τ)` with the analytic Jacobian.
fn fit_exponential(y: &[f64]) -> Option<(f64, f64, f64)> {
    let mut p = initial_guess(y)?;
    let mut cost = exp_residuals(y, &p);
    let mut lambda = 1e-3;
    for _ in 0..1000 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (t, &v) in y.iter().enumerate() {
            let t = t as f64;
            let e = (-p[2] * t).exp();
            let r = v - (p[0] + p[1] * e);
            let j = Vector3::new(1.0, e, -p[1] * t * e);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = p + step;
            let new_cost = exp_residuals(y, &candidate);
            if new_cost.is_finite() && new_cost <= cost {
                let rel = (cost - new_cost) / cost.max(1e-300);
                let small_step = step.norm() <= 1e-15 * (p.norm() + 1e-15);
                p = candidate;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-15);
                improved = true;
                if rel < 1e-15 || small_step || cost == 0.0 {
                    return Some((p[0], p[1], p[2]));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Some((p[0], p[1], p[2]))
}
