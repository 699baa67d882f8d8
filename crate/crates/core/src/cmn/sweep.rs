//! Per-datapoint kernels of a sweep on flat buffers.
//!
//! Latent blocks are `h × h` with `h` typically below ten, so the hot loops
//! avoid heap allocation and work on row-major slices.

use std::f64::consts::{LN_2, PI};

use super::{CmnModel, CmnPosterior, FitConfig, PointLocals, StepCounts};
use crate::data::Dataset;
use crate::distributions::mng_expectations;
use crate::distributions::polya_gamma::{pg_kl_unchecked, pg_mean_unchecked};
use crate::error::Result;
use crate::experts::{expert_kl, update_expert, ExpertSuffStats};
use crate::linalg::{cholesky_inverse_small, cholesky_ln_det_small, cholesky_small, cholesky_solve_small};
use crate::mnlr::{beta_kl, MnlrPosterior, StickAccumulator};
use crate::special::normalize_log_weights;

/// Global expectations needed by the local updates, flattened.
pub(crate) struct GlobalCache {
    d1: usize,
    h: usize,
    k: usize,
    /// gating sticks, `K - 1`
    s0: usize,
    /// output sticks, `L - 1`
    s1: usize,
    /// `K × h`: diagonal of `E[Σ_k⁻¹]`
    prec: Vec<f64>,
    /// `K × h × d1`: `E[Σ_k⁻¹A_k]`
    pm: Vec<f64>,
    /// `K × d1 × d1`: `E[A_kᵀΣ_k⁻¹A_k]`
    quad: Vec<f64>,
    ln_det_prec: Vec<f64>,
    /// `s1 × (h+1)` and `s1 × (h+1)²`
    out_mean: Vec<f64>,
    out_second: Vec<f64>,
    /// `s0 × d1` and `s0 × d1²`
    gate_mean: Vec<f64>,
    gate_second: Vec<f64>,
}

fn flatten_sticks(post: &MnlrPosterior) -> (Vec<f64>, Vec<f64>) {
    let mut mean = Vec::new();
    let mut second = Vec::new();
    for s in post.sticks() {
        mean.extend_from_slice(s.mean().as_slice());
        let m = s.second_moment();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                second.push(m[(i, j)]);
            }
        }
    }
    (mean, second)
}

impl GlobalCache {
    pub(crate) fn new(model: &CmnModel, post: &CmnPosterior) -> Self {
        let (d1, h, k) = (model.input_dim + 1, model.latent_dim, model.num_experts);
        let mut prec = Vec::with_capacity(k * h);
        let mut pm = Vec::with_capacity(k * h * d1);
        let mut quad = Vec::with_capacity(k * d1 * d1);
        let mut ln_det_prec = Vec::with_capacity(k);
        for p in &post.experts.posteriors {
            let e = mng_expectations(p);
            prec.extend(e.precision.iter());
            for i in 0..h {
                for j in 0..d1 {
                    pm.push(e.precision_mean[(i, j)]);
                }
            }
            for i in 0..d1 {
                for j in 0..d1 {
                    quad.push(e.quadratic[(i, j)]);
                }
            }
            ln_det_prec.push(e.ln_det_precision);
        }
        let (out_mean, out_second) = flatten_sticks(&post.output);
        let (gate_mean, gate_second) = flatten_sticks(&post.gating);
        GlobalCache {
            d1,
            h,
            k,
            s0: k - 1,
            s1: model.num_classes - 1,
            prec,
            pm,
            quad,
            ln_det_prec,
            out_mean,
            out_second,
            gate_mean,
            gate_second,
        }
    }
}

/// Per-thread work buffers.
pub(crate) struct Scratch {
    x_hat: Vec<f64>,
    kappa1: Vec<f64>,
    b1: Vec<f64>,
    omega1: Vec<f64>,
    q: Vec<f64>,
    r: Vec<f64>,
    p: Vec<f64>,
    chol: Vec<f64>,
    work: Vec<f64>,
    /// `K × h`: `E[Σ_k⁻¹A_k] x̂₀`
    pmx: Vec<f64>,
    /// `K`: `x̂₀ᵀ E[A_kᵀΣ_k⁻¹A_k] x̂₀`
    quad_x: Vec<f64>,
    /// `s1 × K`: `⟨ψ₁⟩` and `⟨ψ₁²⟩` under `q(x₁|z=k)`
    psi1: Vec<f64>,
    psi1_sq: Vec<f64>,
    psi0: Vec<f64>,
    psi0_sq: Vec<f64>,
    scores: Vec<f64>,
    mu_hat: Vec<f64>,
    m_hat: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new(model: &CmnModel) -> Self {
        let (d1, h, k, s1) = (model.input_dim + 1, model.latent_dim, model.num_experts, model.num_classes - 1);
        Scratch {
            x_hat: vec![0.0; d1],
            kappa1: vec![0.0; s1],
            b1: vec![0.0; s1],
            omega1: vec![0.0; s1],
            q: vec![0.0; h * h],
            r: vec![0.0; h],
            p: vec![0.0; h * h],
            chol: vec![0.0; h * h],
            work: vec![0.0; h * h],
            pmx: vec![0.0; k * h],
            quad_x: vec![0.0; k],
            psi1: vec![0.0; s1 * k],
            psi1_sq: vec![0.0; s1 * k],
            psi0: vec![0.0; k.saturating_sub(1)],
            psi0_sq: vec![0.0; k.saturating_sub(1)],
            scores: vec![0.0; k],
            mu_hat: vec![0.0; h + 1],
            m_hat: vec![0.0; (h + 1) * (h + 1)],
        }
    }
}

fn load_point(x: &[f64], y: usize, s: &mut Scratch) {
    let d = x.len();
    s.x_hat[..d].copy_from_slice(x);
    s.x_hat[d] = 1.0;
    for l in 0..s.kappa1.len() {
        let (kappa, b) = match l.cmp(&y) {
            std::cmp::Ordering::Less => (-0.5, 1.0),
            std::cmp::Ordering::Equal => (0.5, 1.0),
            std::cmp::Ordering::Greater => (0.0, 0.0),
        };
        s.kappa1[l] = kappa;
        s.b1[l] = b;
    }
}

/// Expert terms that depend only on `x̂₀`.
fn expert_input_terms(c: &GlobalCache, s: &mut Scratch) {
    let (d1, h) = (c.d1, c.h);
    for k in 0..c.k {
        for i in 0..h {
            let row = &c.pm[(k * h + i) * d1..(k * h + i + 1) * d1];
            s.pmx[k * h + i] = row.iter().zip(&s.x_hat).map(|(a, b)| a * b).sum();
        }
        let q = &c.quad[k * d1 * d1..(k + 1) * d1 * d1];
        let mut acc = 0.0;
        for i in 0..d1 {
            let mut row = 0.0;
            for j in 0..d1 {
                row += q[i * d1 + j] * s.x_hat[j];
            }
            acc += s.x_hat[i] * row;
        }
        s.quad_x[k] = acc;
    }
}

/// `⟨ψ₀_j⟩`, `⟨ψ₀_j²⟩` for the gating sticks at `x̂₀`.
fn gating_moments(c: &GlobalCache, s: &mut Scratch) {
    let d1 = c.d1;
    for j in 0..c.s0 {
        let mean = &c.gate_mean[j * d1..(j + 1) * d1];
        let second = &c.gate_second[j * d1 * d1..(j + 1) * d1 * d1];
        s.psi0[j] = mean.iter().zip(&s.x_hat).map(|(a, b)| a * b).sum();
        let mut acc = 0.0;
        for a in 0..d1 {
            let mut row = 0.0;
            for b in 0..d1 {
                row += second[a * d1 + b] * s.x_hat[b];
            }
            acc += s.x_hat[a] * row;
        }
        s.psi0_sq[j] = acc;
    }
}

/// `⟨ψ₁_l⟩_k`, `⟨ψ₁_l²⟩_k = Tr(E[β_l β_lᵀ] M̂_k)` for every stick and component.
fn output_moments(c: &GlobalCache, loc: &PointLocals, s: &mut Scratch) {
    let (h, k_n) = (c.h, c.k);
    let h1 = h + 1;
    for l in 0..c.s1 {
        let mean = &c.out_mean[l * h1..(l + 1) * h1];
        let sec = &c.out_second[l * h1 * h1..(l + 1) * h1 * h1];
        for k in 0..k_n {
            let m = &loc.mean[k * h..(k + 1) * h];
            let cov = &loc.cov[k * h * h..(k + 1) * h * h];
            let mut psi = mean[h];
            let mut sq = sec[h * h1 + h];
            for i in 0..h {
                psi += mean[i] * m[i];
                sq += 2.0 * sec[i * h1 + h] * m[i];
                let mut row = 0.0;
                for j in 0..h {
                    row += sec[i * h1 + j] * (cov[i * h + j] + m[i] * m[j]);
                }
                sq += row;
            }
            s.psi1[l * k_n + k] = psi;
            s.psi1_sq[l * k_n + k] = sq;
        }
    }
}

fn set_xi1(c: &GlobalCache, loc: &mut PointLocals, s: &Scratch) {
    for l in 0..c.s1 {
        let mut sq = 0.0;
        for k in 0..c.k {
            sq += loc.gamma[k] * s.psi1_sq[l * c.k + k];
        }
        loc.xi1[l] = sq.max(0.0).sqrt();
    }
}

fn set_xi0(c: &GlobalCache, loc: &mut PointLocals, s: &Scratch) {
    for j in 0..c.s0 {
        loc.xi0[j] = s.psi0_sq[j].max(0.0).sqrt();
    }
}

/// Per-component ELBO contributions before the `-ln γ_k` term:
/// expert log-likelihood, output bound, gating bound and (optionally) entropy.
fn component_scores(c: &GlobalCache, loc: &PointLocals, s: &mut Scratch, entropy: bool) {
    let (h, k_n) = (c.h, c.k);
    let ln_2pi = (2.0 * PI).ln();
    let mut out_const = 0.0;
    for l in 0..c.s1 {
        s.omega1[l] = pg_mean_unchecked(s.b1[l], loc.xi1[l]);
        if s.b1[l] > 0.0 {
            out_const -= s.b1[l] * LN_2 + pg_kl_unchecked(s.b1[l], loc.xi1[l]);
        }
    }
    // gating: g_j is the cost of reaching stick j, paid by every z ≥ j
    let mut passed = 0.0;
    for k in 0..k_n {
        let m = &loc.mean[k * h..(k + 1) * h];
        let cov = &loc.cov[k * h * h..(k + 1) * h * h];
        let prec = &c.prec[k * h..(k + 1) * h];
        let mut fit = 0.0;
        let mut cross = 0.0;
        for i in 0..h {
            fit += prec[i] * (cov[i * h + i] + m[i] * m[i]);
            cross += m[i] * s.pmx[k * h + i];
        }
        let expert = 0.5 * c.ln_det_prec[k] - 0.5 * h as f64 * ln_2pi - 0.5 * (fit - 2.0 * cross + s.quad_x[k]);
        let mut out = out_const;
        for l in 0..c.s1 {
            out += s.kappa1[l] * s.psi1[l * k_n + k] - 0.5 * s.omega1[l] * s.psi1_sq[l * k_n + k];
        }
        let gate = if k < c.s0 {
            let xi = loc.xi0[k];
            let g = LN_2 + 0.5 * pg_mean_unchecked(1.0, xi) * s.psi0_sq[k] + pg_kl_unchecked(1.0, xi);
            let here = passed + 0.5 * s.psi0[k] - g;
            passed += -0.5 * s.psi0[k] - g;
            here
        } else {
            passed
        };
        let mut score = expert + out + gate;
        if entropy {
            score += 0.5 * h as f64 * (1.0 + ln_2pi) + 0.5 * loc.ln_det_cov[k];
        }
        s.scores[k] = score;
    }
}

/// Expert-only latents, then tilts at their optimum. Used at initialisation.
pub(crate) fn init_point(c: &GlobalCache, x: &[f64], y: usize, loc: &mut PointLocals, s: &mut Scratch) {
    let h = c.h;
    load_point(x, y, s);
    expert_input_terms(c, s);
    for k in 0..c.k {
        let mut ln_det = 0.0;
        for i in 0..h {
            let p = c.prec[k * h + i];
            loc.mean[k * h + i] = s.pmx[k * h + i] / p;
            for j in 0..h {
                loc.cov[k * h * h + i * h + j] = if i == j { 1.0 / p } else { 0.0 };
            }
            ln_det -= p.ln();
        }
        loc.ln_det_cov[k] = ln_det;
    }
    output_moments(c, loc, s);
    set_xi1(c, loc, s);
    gating_moments(c, s);
    set_xi0(c, loc, s);
}

/// `q(x₁|z) → ξ₁ → ξ₀ → q(z)` for one datapoint. Returns jitter escalations.
pub(crate) fn e_step_point(
    c: &GlobalCache,
    x: &[f64],
    y: usize,
    loc: &mut PointLocals,
    s: &mut Scratch,
    config: &FitConfig,
) -> Result<u32> {
    let (h, h1) = (c.h, c.h + 1);
    load_point(x, y, s);
    expert_input_terms(c, s);
    gating_moments(c, s);
    let mut escalations = 0;

    // q(x₁ | z = k): expert prior plus the output layer's PG-quadratic term
    s.q.iter_mut().for_each(|v| *v = 0.0);
    s.r.iter_mut().for_each(|v| *v = 0.0);
    for l in 0..c.s1 {
        let w = pg_mean_unchecked(s.b1[l], loc.xi1[l]);
        let mean = &c.out_mean[l * h1..(l + 1) * h1];
        let sec = &c.out_second[l * h1 * h1..(l + 1) * h1 * h1];
        for i in 0..h {
            s.r[i] += s.kappa1[l] * mean[i] - w * sec[i * h1 + h];
            if w != 0.0 {
                for j in 0..h {
                    s.q[i * h + j] += w * sec[i * h1 + j];
                }
            }
        }
    }
    for k in 0..c.k {
        s.p.copy_from_slice(&s.q);
        for i in 0..h {
            s.p[i * h + i] += c.prec[k * h + i];
        }
        escalations += cholesky_small(&s.p, h, &mut s.chol)?;
        let m = &mut loc.mean[k * h..(k + 1) * h];
        for i in 0..h {
            m[i] = s.pmx[k * h + i] + s.r[i];
        }
        cholesky_solve_small(&s.chol, h, m);
        cholesky_inverse_small(&s.chol, h, &mut loc.cov[k * h * h..(k + 1) * h * h], &mut s.work);
        loc.ln_det_cov[k] = -cholesky_ln_det_small(&s.chol, h);
    }

    output_moments(c, loc, s);
    set_xi1(c, loc, s);
    set_xi0(c, loc, s);

    component_scores(c, loc, s, config.include_entropy);
    loc.gamma.copy_from_slice(&s.scores);
    normalize_log_weights(&mut loc.gamma);
    Ok(escalations)
}

/// `Σ_k γ_k (score_k - ln γ_k)` for one datapoint.
fn point_elbo(c: &GlobalCache, x: &[f64], y: usize, loc: &PointLocals, s: &mut Scratch) -> f64 {
    load_point(x, y, s);
    expert_input_terms(c, s);
    gating_moments(c, s);
    output_moments(c, loc, s);
    component_scores(c, loc, s, true);
    loc.gamma
        .iter()
        .zip(&s.scores)
        .filter(|(&g, _)| g > 0.0)
        .map(|(&g, &score)| g * (score - g.ln()))
        .sum()
}

/// ELBO decomposition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    /// `Σₙ Σ_k γ_k [expert + output + gating + entropy - ln γ_k]`.
    pub data: f64,
    pub output_kl: f64,
    pub gating_kl: f64,
    pub expert_kl: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.data - self.output_kl - self.gating_kl - self.expert_kl
    }
}

pub(crate) fn elbo_terms(model: &CmnModel, post: &CmnPosterior, data: &Dataset) -> Result<ElboTerms> {
    use rayon::prelude::*;
    let cache = GlobalCache::new(model, post);
    let per_point: Vec<f64> = post
        .locals
        .par_iter()
        .enumerate()
        .map_init(
            || Scratch::new(model),
            |s, (n, loc)| {
                let x: Vec<f64> = data.features.row(n).iter().copied().collect();
                point_elbo(&cache, &x, data.labels[n], loc, s)
            },
        )
        .collect();
    let hp = model.hyper;
    Ok(ElboTerms {
        data: per_point.iter().sum(),
        output_kl: beta_kl(&post.output, hp.sigma1 * hp.sigma1)?,
        gating_kl: beta_kl(&post.gating, hp.sigma0 * hp.sigma0)?,
        expert_kl: post
            .experts
            .posteriors
            .iter()
            .map(|p| expert_kl(p, &post.experts.prior))
            .sum::<Result<f64>>()?,
    })
}

pub(crate) fn m_step(model: &CmnModel, post: &mut CmnPosterior, data: &Dataset) -> Result<StepCounts> {
    let (d, h, k_n) = (model.input_dim, model.latent_dim, model.num_experts);
    let (s0, s1, h1) = (k_n - 1, model.num_classes - 1, h + 1);
    let hp = model.hyper;
    let mut out_acc = StickAccumulator::new(s1, h, hp.sigma1 * hp.sigma1);
    let mut gate_acc = StickAccumulator::new(s0, d, hp.sigma0 * hp.sigma0);
    let mut stats = vec![ExpertSuffStats::zeros(h, d); k_n];
    let mut s = Scratch::new(model);
    for (n, loc) in post.locals.iter().enumerate() {
        let x: Vec<f64> = data.features.row(n).iter().copied().collect();
        load_point(&x, data.labels[n], &mut s);

        // mixture moments of x̂₁ = [x₁; 1]
        s.mu_hat.iter_mut().for_each(|v| *v = 0.0);
        s.m_hat.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..k_n {
            let g = loc.gamma[k];
            let m = &loc.mean[k * h..(k + 1) * h];
            let cov = &loc.cov[k * h * h..(k + 1) * h * h];
            for i in 0..h {
                s.mu_hat[i] += g * m[i];
                for j in 0..h {
                    s.m_hat[i * h1 + j] += g * (cov[i * h + j] + m[i] * m[j]);
                }
            }
        }
        s.mu_hat[h] = 1.0;
        for i in 0..h {
            s.m_hat[i * h1 + h] = s.mu_hat[i];
            s.m_hat[h * h1 + i] = s.mu_hat[i];
        }
        s.m_hat[h * h1 + h] = 1.0;
        for l in 0..s1 {
            let w = pg_mean_unchecked(s.b1[l], loc.xi1[l]);
            out_acc.add(l, s.kappa1[l], w, &s.mu_hat, &s.m_hat);
        }

        // gating with soft labels: b̄_j = P(z ≥ j), κ̄_j = γ_j - b̄_j/2
        let mut tail: f64 = loc.gamma.iter().sum();
        for j in 0..s0 {
            let b = tail.max(0.0);
            let kappa = loc.gamma[j] - 0.5 * b;
            let w = b * pg_mean_unchecked(1.0, loc.xi0[j]);
            gate_acc.add_point(j, kappa, w, &s.x_hat);
            tail -= loc.gamma[j];
        }

        for (k, st) in stats.iter_mut().enumerate() {
            st.push_slices(
                loc.gamma[k],
                &s.x_hat,
                &loc.mean[k * h..(k + 1) * h],
                &loc.cov[k * h * h..(k + 1) * h * h],
            );
        }
    }
    let mut counts = StepCounts::default();
    post.output = out_acc.finish()?;
    post.gating = gate_acc.finish()?;
    counts.jitter_escalations += (post.output.jitter_escalations() + post.gating.jitter_escalations()) as u64;
    for (k, st) in stats.iter().enumerate() {
        let up = update_expert(&post.experts.prior, st)?;
        counts.jitter_escalations += up.jitter_escalations as u64;
        counts.rate_clamps += up.clamped_rates as u64;
        post.experts.posteriors[k] = up.posterior;
    }
    Ok(counts)
}
