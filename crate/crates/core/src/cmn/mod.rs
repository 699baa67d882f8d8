//! Two-layer conditional mixture network fitted by coordinate ascent.
//!
//! The variational posterior keeps the structured factor `q(x₁|z₁)q(z₁)` per
//! datapoint, Gaussian factors for both logistic layers and a
//! Matrix-Normal-Gamma per expert. A sweep updates, in order,
//! `q(x₁|z₁) → q(ω₁) → q(ω₀) → q(z₁)` and then `q(β₁) → q(β₀) → experts`.
//!
//! The augmentation variables are `q(ω₁ⁿ_l) = PG(b_l(yⁿ), ξ₁ⁿ_l)`, shared by
//! all components, and `q(ω₀ⁿ_j | z) = PG(b_j(z), ξ₀ⁿ_j)` with one tilt per
//! stick. The ELBO is evaluated at the stored tilts, so each step above is
//! an exact coordinate maximisation and the bound never decreases.

mod io;
mod predict;
mod sweep;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distributions::{GaussianNatural, MatrixNormalGamma};
use crate::error::{CmnError, Result};
use crate::experts::{ExpertBank, LatentMoments};
use crate::linalg::SpdFactor;
use crate::mnlr::MnlrPosterior;

pub use io::{load_posterior, save_posterior, PosteriorFile};
pub use predict::{predict, PredictiveSampler};
pub use sweep::ElboTerms;

use sweep::{GlobalCache, Scratch};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparameters {
    /// Column scale of the expert prior, `V₀ = v₀I`.
    pub v0: f64,
    pub a0: f64,
    pub b0: f64,
    /// Prior standard deviation of the gating coefficients.
    pub sigma0: f64,
    /// Prior standard deviation of the output coefficients.
    pub sigma1: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            v0: 10.0,
            a0: 2.0,
            b0: 1.0,
            sigma0: 5.0,
            sigma1: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmnModel {
    /// `d`
    pub input_dim: usize,
    /// `h`
    pub latent_dim: usize,
    /// `K`
    pub num_experts: usize,
    /// `L`
    pub num_classes: usize,
    pub hyper: Hyperparameters,
}

impl CmnModel {
    pub fn new(
        input_dim: usize,
        latent_dim: usize,
        num_experts: usize,
        num_classes: usize,
        hyper: Hyperparameters,
    ) -> Result<Self> {
        let m = CmnModel {
            input_dim,
            latent_dim,
            num_experts,
            num_classes,
            hyper,
        };
        m.validate()?;
        Ok(m)
    }

    /// `h = L - 1` and default priors.
    pub fn with_defaults(input_dim: usize, num_classes: usize, num_experts: usize) -> Result<Self> {
        Self::new(
            input_dim,
            num_classes.saturating_sub(1),
            num_experts,
            num_classes,
            Hyperparameters::default(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts < 1 || self.num_classes < 2 || self.latent_dim < 1 {
            return Err(CmnError::domain(format!(
                "need K ≥ 1, L ≥ 2 and h ≥ 1 (got K={}, L={}, h={})",
                self.num_experts, self.num_classes, self.latent_dim
            )));
        }
        let h = &self.hyper;
        if [h.v0, h.a0, h.b0, h.sigma0, h.sigma1].iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(CmnError::domain("prior hyperparameters must be positive and finite"));
        }
        Ok(())
    }

    pub fn expert_prior(&self) -> Result<MatrixNormalGamma> {
        MatrixNormalGamma::prior(self.latent_dim, self.input_dim, self.hyper.v0, self.hyper.a0, self.hyper.b0)
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(CmnError::EmptyDataset);
        }
        if data.dim() != self.input_dim {
            return Err(CmnError::shape(format!(
                "model expects {} features, data has {}",
                self.input_dim,
                data.dim()
            )));
        }
        if let Some(n) = data.labels.iter().position(|&y| y >= self.num_classes) {
            return Err(CmnError::domain(format!(
                "label {} out of range for {} classes",
                data.labels[n], self.num_classes
            ))
            .at_datapoint(n));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub max_sweeps: usize,
    /// E-step passes per sweep.
    pub inner_iters: usize,
    pub seed: u64,
    /// Evaluate and record the ELBO after every sweep.
    pub elbo_record: bool,
    /// Standard deviation of the initial expert means.
    pub init_scale: f64,
    /// Include `H[q(x₁|z₁=k)]` in the responsibility update.
    pub include_entropy: bool,
    /// Stop once the relative ELBO change falls below this.
    pub rel_tol: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_sweeps: 500,
            inner_iters: 1,
            seed: 0,
            elbo_record: true,
            init_scale: 1.0,
            include_entropy: true,
            rel_tol: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps < 1 || self.inner_iters < 1 {
            return Err(CmnError::domain("max_sweeps and inner_iters must be at least 1"));
        }
        if !(self.init_scale >= 0.0) {
            return Err(CmnError::domain("init_scale must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    /// ELBO after each sweep; empty when recording is off.
    pub elbo: Vec<f64>,
    /// Seconds per sweep.
    pub wall_time: Vec<f64>,
    pub jitter_escalations: u64,
    /// Expert noise rates clamped at the floor.
    pub rate_clamps: u64,
    pub stopped_early: bool,
}

impl FitTrace {
    pub fn sweeps(&self) -> usize {
        self.wall_time.len()
    }

    pub fn final_elbo(&self) -> Option<f64> {
        self.elbo.last().copied()
    }
}

/// Local factors of one datapoint.
#[derive(Clone, Debug, PartialEq)]
pub struct PointLocals {
    pub(crate) gamma: Vec<f64>,
    /// `K × h`, component-major.
    pub(crate) mean: Vec<f64>,
    /// `K × h × h`, row-major blocks.
    pub(crate) cov: Vec<f64>,
    pub(crate) ln_det_cov: Vec<f64>,
    pub(crate) xi0: Vec<f64>,
    pub(crate) xi1: Vec<f64>,
}

impl PointLocals {
    fn zeros(k: usize, h: usize, classes: usize) -> Self {
        PointLocals {
            gamma: vec![0.0; k],
            mean: vec![0.0; k * h],
            cov: vec![0.0; k * h * h],
            ln_det_cov: vec![0.0; k],
            xi0: vec![0.0; k - 1],
            xi1: vec![0.0; classes - 1],
        }
    }

    pub fn responsibilities(&self) -> &[f64] {
        &self.gamma
    }

    pub fn xi0(&self) -> &[f64] {
        &self.xi0
    }

    pub fn xi1(&self) -> &[f64] {
        &self.xi1
    }
}

#[derive(Clone, Debug)]
pub struct CmnPosterior {
    pub gating: MnlrPosterior,
    pub output: MnlrPosterior,
    pub experts: ExpertBank,
    locals: Vec<PointLocals>,
    latent_dim: usize,
}

impl CmnPosterior {
    /// Globals only; used for prediction and after loading from disk.
    pub fn from_globals(gating: MnlrPosterior, output: MnlrPosterior, experts: ExpertBank) -> Result<Self> {
        if experts.is_empty() || gating.num_classes() != experts.len() {
            return Err(CmnError::shape("gating sticks do not match the number of experts"));
        }
        let latent_dim = experts.prior.output_dim();
        if output.input_dim() != latent_dim || gating.input_dim() + 1 != experts.prior.input_dim() {
            return Err(CmnError::shape("layer dimensions are inconsistent"));
        }
        Ok(CmnPosterior {
            gating,
            output,
            experts,
            locals: Vec::new(),
            latent_dim,
        })
    }

    pub fn num_points(&self) -> usize {
        self.locals.len()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn locals(&self) -> &[PointLocals] {
        &self.locals
    }

    pub fn responsibilities(&self, n: usize) -> &[f64] {
        &self.locals[n].gamma
    }

    /// Moments of `q(x₁ⁿ | z₁ⁿ = k)`.
    pub fn latent(&self, n: usize, k: usize) -> LatentMoments {
        let h = self.latent_dim;
        let loc = &self.locals[n];
        LatentMoments {
            mean: DVector::from_column_slice(&loc.mean[k * h..(k + 1) * h]),
            cov: DMatrix::from_row_slice(h, h, &loc.cov[k * h * h..(k + 1) * h * h]),
        }
    }

    /// Natural parameters of `q(x₁ⁿ | z₁ⁿ = k)`.
    pub fn latent_natural(&self, n: usize, k: usize) -> Result<GaussianNatural> {
        let m = self.latent(n, k);
        GaussianNatural::from_moments(&m.mean, &m.cov)
    }

    pub fn set_responsibilities(&mut self, n: usize, gamma: &[f64]) -> Result<()> {
        let loc = &mut self.locals[n];
        if gamma.len() != loc.gamma.len() {
            return Err(CmnError::shape("one responsibility per expert is required"));
        }
        let total: f64 = gamma.iter().sum();
        if (total - 1.0).abs() > 1e-10 || gamma.iter().any(|&g| !(g >= 0.0)) {
            return Err(CmnError::domain(format!("responsibilities sum to {total}")));
        }
        loc.gamma.copy_from_slice(gamma);
        Ok(())
    }

    pub fn set_latent(&mut self, n: usize, k: usize, moments: &LatentMoments) -> Result<()> {
        let h = self.latent_dim;
        if moments.mean.len() != h || moments.cov.shape() != (h, h) {
            return Err(CmnError::shape("latent moments have the wrong dimension"));
        }
        let ln_det = SpdFactor::new(&moments.cov)?.ln_det();
        let loc = &mut self.locals[n];
        loc.mean[k * h..(k + 1) * h].copy_from_slice(moments.mean.as_slice());
        for i in 0..h {
            for j in 0..h {
                loc.cov[k * h * h + i * h + j] = moments.cov[(i, j)];
            }
        }
        loc.ln_det_cov[k] = ln_det;
        Ok(())
    }

    pub fn set_xi(&mut self, n: usize, xi0: &[f64], xi1: &[f64]) -> Result<()> {
        let loc = &mut self.locals[n];
        if xi0.len() != loc.xi0.len() || xi1.len() != loc.xi1.len() {
            return Err(CmnError::shape("tilt vectors have the wrong length"));
        }
        if xi0.iter().chain(xi1).any(|&x| !(x >= 0.0)) {
            return Err(CmnError::domain("tilts must be non-negative"));
        }
        loc.xi0.copy_from_slice(xi0);
        loc.xi1.copy_from_slice(xi1);
        Ok(())
    }

    /// Swaps experts `i` and `j` together with their responsibilities and latents.
    ///
    /// The gating sticks are left alone, so this is only a relabelling of
    /// the model when `K = 2`, where the stick prior is symmetric.
    pub fn swap_experts(&mut self, i: usize, j: usize) {
        let h = self.latent_dim;
        self.experts.posteriors.swap(i, j);
        for loc in &mut self.locals {
            loc.gamma.swap(i, j);
            loc.ln_det_cov.swap(i, j);
            for a in 0..h {
                loc.mean.swap(i * h + a, j * h + a);
            }
            for a in 0..h * h {
                loc.cov.swap(i * h * h + a, j * h * h + a);
            }
        }
    }
}

/// Priors on both layers, random expert means and jittered uniform
/// responsibilities, followed by an expert-only pass over the latents.
pub fn init_posterior(model: &CmnModel, data: &Dataset, config: &FitConfig) -> Result<CmnPosterior> {
    model.validate()?;
    config.validate()?;
    model.check_data(data)?;
    let (d, h, k, l) = (model.input_dim, model.latent_dim, model.num_experts, model.num_classes);
    let hp = model.hyper;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prior = model.expert_prior()?;
    let mut experts = ExpertBank::from_prior(prior.clone(), k);
    for post in &mut experts.posteriors {
        let m = DMatrix::from_fn(h, d + 1, |_, _| config.init_scale * rng.sample::<f64, _>(StandardNormal));
        *post = MatrixNormalGamma::new(m, prior.v.clone(), prior.a, prior.b.clone())?;
    }
    let mut post = CmnPosterior {
        gating: MnlrPosterior::prior(k - 1, d, hp.sigma0 * hp.sigma0),
        output: MnlrPosterior::prior(l - 1, h, hp.sigma1 * hp.sigma1),
        experts,
        locals: vec![PointLocals::zeros(k, h, l); data.len()],
        latent_dim: h,
    };
    for loc in &mut post.locals {
        let uniform = 1.0 / k as f64;
        let mut total = 0.0;
        for g in loc.gamma.iter_mut() {
            let jitter: f64 = rng.sample(Exp1);
            *g = jitter;
            total += jitter;
        }
        for g in loc.gamma.iter_mut() {
            *g = 0.5 * (uniform + *g / total);
        }
        let s: f64 = loc.gamma.iter().sum();
        loc.gamma.iter_mut().for_each(|g| *g /= s);
    }
    let cache = GlobalCache::new(model, &post);
    let mut scratch = Scratch::new(model);
    for (n, loc) in post.locals.iter_mut().enumerate() {
        sweep::init_point(&cache, &data.row(n), data.labels[n], loc, &mut scratch);
    }
    Ok(post)
}

/// Per-sweep diagnostic counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepCounts {
    pub jitter_escalations: u64,
    pub rate_clamps: u64,
}

/// Updates every local factor given the current globals.
pub fn e_step(model: &CmnModel, posterior: &mut CmnPosterior, data: &Dataset, config: &FitConfig) -> Result<StepCounts> {
    model.check_data(data)?;
    if posterior.num_points() != data.len() {
        return Err(CmnError::shape("posterior locals do not match the dataset"));
    }
    let cache = GlobalCache::new(model, posterior);
    let escalations: Vec<u32> = posterior
        .locals
        .par_iter_mut()
        .enumerate()
        .map_init(
            || Scratch::new(model),
            |scratch, (n, loc)| {
                let x: Vec<f64> = data.features.row(n).iter().copied().collect();
                sweep::e_step_point(&cache, &x, data.labels[n], loc, scratch, config)
                    .map_err(|e| e.at_datapoint(n))
            },
        )
        .collect::<Result<Vec<u32>>>()?;
    Ok(StepCounts {
        jitter_escalations: escalations.iter().map(|&e| e as u64).sum(),
        rate_clamps: 0,
    })
}

/// Updates both logistic layers and every expert from the current locals.
pub fn m_step(model: &CmnModel, posterior: &mut CmnPosterior, data: &Dataset) -> Result<StepCounts> {
    model.check_data(data)?;
    if posterior.num_points() != data.len() {
        return Err(CmnError::shape("posterior locals do not match the dataset"));
    }
    sweep::m_step(model, posterior, data)
}

/// The evidence lower bound at the current factors.
pub fn elbo(model: &CmnModel, posterior: &CmnPosterior, data: &Dataset) -> Result<f64> {
    Ok(elbo_terms(model, posterior, data)?.total())
}

/// The ELBO split into its data term and the global KL penalties.
pub fn elbo_terms(model: &CmnModel, posterior: &CmnPosterior, data: &Dataset) -> Result<ElboTerms> {
    if posterior.num_points() != data.len() {
        return Err(CmnError::shape("posterior locals do not match the dataset"));
    }
    if !data.is_empty() {
        model.check_data(data)?;
    }
    sweep::elbo_terms(model, posterior, data)
}

pub fn fit(model: &CmnModel, data: &Dataset, config: &FitConfig) -> Result<(CmnPosterior, FitTrace)> {
    let posterior = init_posterior(model, data, config)?;
    fit_from(model, data, posterior, config)
}

/// Runs sweeps starting from an existing posterior.
pub fn fit_from(
    model: &CmnModel,
    data: &Dataset,
    mut posterior: CmnPosterior,
    config: &FitConfig,
) -> Result<(CmnPosterior, FitTrace)> {
    config.validate()?;
    model.check_data(data)?;
    let mut trace = FitTrace::default();
    let record = config.elbo_record || config.rel_tol.is_some();
    for sweep in 0..config.max_sweeps {
        let start = Instant::now();
        let step = (|| -> Result<StepCounts> {
            let mut counts = StepCounts::default();
            for _ in 0..config.inner_iters {
                counts.jitter_escalations += e_step(model, &mut posterior, data, config)?.jitter_escalations;
            }
            let m = m_step(model, &mut posterior, data)?;
            counts.jitter_escalations += m.jitter_escalations;
            counts.rate_clamps += m.rate_clamps;
            Ok(counts)
        })()
        .map_err(|e| e.at_sweep(sweep))?;
        trace.jitter_escalations += step.jitter_escalations;
        trace.rate_clamps += step.rate_clamps;
        let value = if record {
            Some(elbo(model, &posterior, data).map_err(|e| e.at_sweep(sweep))?)
        } else {
            None
        };
        trace.wall_time.push(start.elapsed().as_secs_f64());
        if let Some(v) = value {
            if !v.is_finite() {
                return Err(CmnError::domain(format!("ELBO became {v}")).at_sweep(sweep));
            }
            let previous = trace.elbo.last().copied();
            trace.elbo.push(v);
            if let (Some(tol), Some(prev)) = (config.rel_tol, previous) {
                if (v - prev).abs() <= tol * prev.abs() {
                    trace.stopped_early = true;
                    break;
                }
            }
        }
    }
    if !config.elbo_record {
        trace.elbo.clear();
    }
    Ok((posterior, trace))
}
