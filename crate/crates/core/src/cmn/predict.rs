//! Monte Carlo posterior predictive.
//!
//! Each draw samples both logistic layers and every expert from `q`. The
//! expert index is summed out with the sampled gate probabilities and the
//! latent `x₁` is sampled per expert.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use super::CmnPosterior;
use crate::data::Dataset;
use crate::distributions::{stick_breaking_probs, StickBreakingCoefficients};
use crate::error::{CmnError, Result};
use crate::linalg::{pad_one, SpdFactor};
use crate::metrics::{PointwiseLogLik, PredictionSet};
use crate::mnlr::MnlrPosterior;
use crate::seeds::derive_seed;

/// Stream index reserved for the parameter draws.
const PARAMETER_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug)]
struct ExpertDraw {
    a: DMatrix<f64>,
    sd: Vec<f64>,
}

#[derive(Clone, Debug)]
struct ParamDraw {
    gate: StickBreakingCoefficients,
    output: StickBreakingCoefficients,
    experts: Vec<ExpertDraw>,
}

/// Lower factor of a covariance, or `None` for a point mass.
fn sampling_factor(cov: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    if cov.iter().all(|&c| c == 0.0) {
        Ok(None)
    } else {
        Ok(Some(SpdFactor::new(cov)?.lower()))
    }
}

fn gaussian_draw(mean: &DVector<f64>, factor: &Option<DMatrix<f64>>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    match factor {
        None => mean.clone(),
        Some(l) => {
            let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            mean + l * z
        }
    }
}

fn stick_factors(post: &MnlrPosterior) -> Result<Vec<Option<DMatrix<f64>>>> {
    post.sticks().iter().map(|s| sampling_factor(s.cov())).collect()
}

fn sample_sticks(
    post: &MnlrPosterior,
    factors: &[Option<DMatrix<f64>>],
    rng: &mut ChaCha8Rng,
) -> Result<StickBreakingCoefficients> {
    let dim = post.input_dim() + 1;
    let mut beta = DMatrix::zeros(post.num_sticks(), dim);
    for (k, (s, f)) in post.sticks().iter().zip(factors).enumerate() {
        let b = gaussian_draw(s.mean(), f, rng);
        beta.row_mut(k).copy_from(&b.transpose());
    }
    StickBreakingCoefficients::new(beta, post.num_classes())
}

/// A fixed set of parameter draws, shared by every input it is applied to.
#[derive(Clone, Debug)]
pub struct PredictiveSampler {
    draws: Vec<ParamDraw>,
    latent_draws: usize,
    seed: u64,
    input_dim: usize,
    num_classes: usize,
}

impl PredictiveSampler {
    /// Draws `num_samples` parameter sets; each evaluation then samples
    /// `latent_draws` latents per expert and draw.
    pub fn new(posterior: &CmnPosterior, num_samples: usize, latent_draws: usize, seed: u64) -> Result<Self> {
        if num_samples < 1 || latent_draws < 1 {
            return Err(CmnError::domain("need at least one parameter and one latent draw"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, PARAMETER_STREAM));
        let gate_f = stick_factors(&posterior.gating)?;
        let out_f = stick_factors(&posterior.output)?;
        let expert_f: Vec<Option<DMatrix<f64>>> = posterior
            .experts
            .posteriors
            .iter()
            .map(|p| sampling_factor(&p.v))
            .collect::<Result<_>>()?;
        let mut draws = Vec::with_capacity(num_samples);
        for _ in 0..num_samples {
            let gate = sample_sticks(&posterior.gating, &gate_f, &mut rng)?;
            let output = sample_sticks(&posterior.output, &out_f, &mut rng)?;
            let mut experts = Vec::with_capacity(posterior.num_experts());
            for (p, f) in posterior.experts.posteriors.iter().zip(&expert_f) {
                let (h, cols) = p.m.shape();
                let mut a = p.m.clone();
                let mut sd = Vec::with_capacity(h);
                for i in 0..h {
                    let tau = Gamma::new(p.a, 1.0 / p.b[i])
                        .map_err(|e| CmnError::domain(e.to_string()))?
                        .sample(&mut rng);
                    let s = 1.0 / tau.sqrt();
                    sd.push(s);
                    if let Some(l) = f {
                        let z = DVector::from_fn(cols, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let row = l * z * s;
                        for j in 0..cols {
                            a[(i, j)] += row[j];
                        }
                    }
                }
                experts.push(ExpertDraw { a, sd });
            }
            draws.push(ParamDraw { gate, output, experts });
        }
        Ok(PredictiveSampler {
            draws,
            latent_draws,
            seed,
            input_dim: posterior.gating.input_dim(),
            num_classes: posterior.output.num_classes(),
        })
    }

    pub fn num_samples(&self) -> usize {
        self.draws.len()
    }

    /// `S × L` class probabilities, one row per parameter draw. Latent
    /// noise comes from stream `stream`, so results do not depend on the
    /// order in which inputs are evaluated.
    pub fn draw_probs(&self, x0: &[f64], stream: u64) -> Result<DMatrix<f64>> {
        if x0.len() != self.input_dim {
            return Err(CmnError::shape(format!(
                "input has {} features, model expects {}",
                x0.len(),
                self.input_dim
            )));
        }
        let x_hat = pad_one(x0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, stream));
        let mut out = DMatrix::zeros(self.draws.len(), self.num_classes);
        let weight = 1.0 / self.latent_draws as f64;
        for (s, draw) in self.draws.iter().enumerate() {
            let gate = stick_breaking_probs(&draw.gate, x0)?;
            for (k, e) in draw.experts.iter().enumerate() {
                let mean = &e.a * &x_hat;
                for _ in 0..self.latent_draws {
                    let x1: Vec<f64> = mean
                        .iter()
                        .zip(&e.sd)
                        .map(|(m, sd)| m + sd * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let p = stick_breaking_probs(&draw.output, &x1)?;
                    for c in 0..self.num_classes {
                        out[(s, c)] += gate[k] * weight * p[c];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Mean of [`draw_probs`](Self::draw_probs) over the parameter draws.
    pub fn predict(&self, x0: &[f64], stream: u64) -> Result<DVector<f64>> {
        let rows = self.draw_probs(x0, stream)?;
        let mut mean = rows.row_mean().transpose();
        let total = mean.sum();
        mean /= total;
        Ok(mean)
    }

    /// Predictive probabilities and per-draw log-likelihoods for a labelled set.
    /// Datapoint `n` uses latent stream `n`.
    pub fn evaluate(&self, data: &Dataset) -> Result<(PredictionSet, PointwiseLogLik)> {
        if data.num_classes > self.num_classes {
            return Err(CmnError::shape("dataset has more classes than the model"));
        }
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..data.len())
            .into_par_iter()
            .map(|n| {
                let draws = self.draw_probs(&data.row(n), n as u64).map_err(|e| e.at_datapoint(n))?;
                let y = data.labels[n];
                let ll = (0..draws.nrows()).map(|s| draws[(s, y)].max(1e-300).ln()).collect();
                let mut mean: Vec<f64> = (0..self.num_classes).map(|c| draws.column(c).mean()).collect();
                let total: f64 = mean.iter().sum();
                mean.iter_mut().for_each(|p| *p /= total);
                Ok((mean, ll))
            })
            .collect::<Result<_>>()?;
        let n = data.len();
        let probs = DMatrix::from_fn(n, self.num_classes, |i, c| rows[i].0[c]);
        let ll = DMatrix::from_fn(self.draws.len(), n, |s, i| rows[i].1[s]);
        Ok((PredictionSet::new(probs, data.labels.clone())?, PointwiseLogLik::new(ll)?))
    }
}

/// Posterior predictive class probabilities at `x0` from `num_samples`
/// parameter draws with one latent draw each.
pub fn predict(posterior: &CmnPosterior, x0: &[f64], num_samples: usize, seed: u64) -> Result<DVector<f64>> {
    PredictiveSampler::new(posterior, num_samples, 1, seed)?.predict(x0, 0)
}
