//! Variational Bayesian multinomial logistic regression with Pólya-Gamma
//! augmentation on a stick-breaking likelihood.
//!
//! Each stick `k` has an independent Gaussian factor `q(β_k)` over `m + 1`
//! weights (bias last). Inputs enter only through their first and second
//! moments `μ̂ = E[[x;1]]` and `M̂ = E[[x;1][x;1]ᵀ]`, so deterministic and
//! uncertain inputs share one code path.

use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector};

use crate::distributions::{
    isotropic_gaussian_kl, kappa_vector, GaussianNatural, PGState, StickBreakingCoefficients,
};
use crate::error::{CmnError, Result};
use crate::linalg::{pad_one, symmetrize, trace_of_product, SpdFactor};
use crate::special::{ln_cosh, sigmoid};

/// One stick's Gaussian factor, kept in both parameterisations.
#[derive(Clone, Debug)]
pub struct StickFactor {
    natural: Option<GaussianNatural>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    second_moment: DMatrix<f64>,
}

impl StickFactor {
    fn from_natural(natural: GaussianNatural) -> Result<(Self, u32)> {
        let factor = SpdFactor::new(&natural.precision())?;
        let mean = factor.solve(&natural.lambda1);
        let cov = factor.inverse();
        Ok((Self::assemble(Some(natural), mean, cov), factor.escalations))
    }

    fn assemble(natural: Option<GaussianNatural>, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let mut second_moment = &cov + &mean * mean.transpose();
        symmetrize(&mut second_moment);
        StickFactor {
            natural,
            mean,
            cov,
            second_moment,
        }
    }

    /// Natural parameters; `None` for a point mass.
    pub fn natural(&self) -> Option<&GaussianNatural> {
        self.natural.as_ref()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `E[β βᵀ] = Σ + μμᵀ`.
    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.second_moment
    }
}

#[derive(Clone, Debug)]
pub struct MnlrPosterior {
    sticks: Vec<StickFactor>,
    input_dim: usize,
    prior_var: f64,
    escalations: u32,
}

impl MnlrPosterior {
    /// Every stick at the prior `N(0, σ²I)`.
    pub fn prior(num_sticks: usize, input_dim: usize, prior_var: f64) -> Self {
        let dim = input_dim + 1;
        let stick = StickFactor::assemble(
            Some(GaussianNatural::isotropic(dim, prior_var)),
            DVector::zeros(dim),
            DMatrix::identity(dim, dim) * prior_var,
        );
        MnlrPosterior {
            sticks: vec![stick; num_sticks],
            input_dim,
            prior_var,
            escalations: 0,
        }
    }

    /// Builds a posterior directly from per-stick moments. A zero covariance
    /// is allowed and gives a point mass.
    pub fn from_moments(
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        prior_var: f64,
    ) -> Result<Self> {
        if means.len() != covs.len() {
            return Err(CmnError::shape("one covariance per stick mean is required"));
        }
        let dim = means.first().map_or(1, |m| m.len());
        if dim == 0 {
            return Err(CmnError::shape("stick weights need at least the bias column"));
        }
        let mut sticks = Vec::with_capacity(means.len());
        for (mean, cov) in means.into_iter().zip(covs) {
            if mean.len() != dim || cov.shape() != (dim, dim) {
                return Err(CmnError::shape("inconsistent stick dimensions"));
            }
            let natural = if cov.iter().all(|&c| c == 0.0) {
                None
            } else {
                Some(GaussianNatural::from_moments(&mean, &cov)?)
            };
            sticks.push(StickFactor::assemble(natural, mean, cov));
        }
        Ok(MnlrPosterior {
            sticks,
            input_dim: dim - 1,
            prior_var,
            escalations: 0,
        })
    }

    pub fn from_naturals(naturals: Vec<GaussianNatural>, input_dim: usize, prior_var: f64) -> Result<Self> {
        let mut escalations = 0;
        let mut sticks = Vec::with_capacity(naturals.len());
        for nat in naturals {
            if nat.dim() != input_dim + 1 {
                return Err(CmnError::shape("stick factor has the wrong dimension"));
            }
            let (s, e) = StickFactor::from_natural(nat)?;
            escalations += e;
            sticks.push(s);
        }
        Ok(MnlrPosterior {
            sticks,
            input_dim,
            prior_var,
            escalations,
        })
    }

    pub fn num_sticks(&self) -> usize {
        self.sticks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.sticks.len() + 1
    }

    /// Input dimension without the bias column.
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn sticks(&self) -> &[StickFactor] {
        &self.sticks
    }

    /// Jitter escalations spent while building this posterior.
    pub fn jitter_escalations(&self) -> u32 {
        self.escalations
    }

    /// Posterior-mean coefficients as a stick-breaking weight matrix.
    pub fn mean_coefficients(&self) -> StickBreakingCoefficients {
        let dim = self.input_dim + 1;
        let beta = DMatrix::from_fn(self.sticks.len(), dim, |k, j| self.sticks[k].mean[j]);
        StickBreakingCoefficients::new(beta, self.num_classes()).expect("consistent by construction")
    }

    /// `(⟨ψ_k⟩, ⟨ψ_k²⟩)` for every stick given input moments.
    pub fn psi_moments(&self, mu_hat: &DVector<f64>, m_hat: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        self.sticks
            .iter()
            .map(|s| (s.mean.dot(mu_hat), trace_of_product(&s.second_moment, m_hat)))
            .unzip()
    }
}

/// Per-datapoint input moments and augmentation states for one MNLR layer.
#[derive(Clone, Debug)]
pub struct AugmentationBatch {
    /// `N × (C-1)` augmentation states.
    pub states: Vec<Vec<PGState>>,
    /// `[μ; 1]` per datapoint.
    pub mu_hat: Vec<DVector<f64>>,
    /// `[[Σ + μμᵀ, μ], [μᵀ, 1]]` per datapoint.
    pub m_hat: Vec<DMatrix<f64>>,
    num_sticks: usize,
    input_dim: usize,
}

/// `(μ̂, M̂)` for an input with mean `mean` and covariance `cov` (zero when `None`).
pub fn input_moments(mean: &[f64], cov: Option<&DMatrix<f64>>) -> (DVector<f64>, DMatrix<f64>) {
    let mu_hat = pad_one(mean);
    let mut m_hat = &mu_hat * mu_hat.transpose();
    if let Some(cov) = cov {
        let m = mean.len();
        let mut block = m_hat.view_mut((0, 0), (m, m));
        block += cov;
    }
    (mu_hat, m_hat)
}

impl AugmentationBatch {
    pub fn new(
        states: Vec<Vec<PGState>>,
        mu_hat: Vec<DVector<f64>>,
        m_hat: Vec<DMatrix<f64>>,
        num_sticks: usize,
        input_dim: usize,
    ) -> Result<Self> {
        if states.len() != mu_hat.len() || states.len() != m_hat.len() {
            return Err(CmnError::shape("states, mu_hat and M_hat must have one entry per datapoint"));
        }
        let dim = input_dim + 1;
        for (n, ((s, mu), mm)) in states.iter().zip(&mu_hat).zip(&m_hat).enumerate() {
            if s.len() != num_sticks || mu.len() != dim || mm.shape() != (dim, dim) {
                return Err(CmnError::shape(format!("datapoint {n} has inconsistent dimensions")));
            }
            if mu[input_dim] != 1.0 || mm[(input_dim, input_dim)] != 1.0 {
                return Err(CmnError::domain(format!("datapoint {n}: input moments are not bias-padded")));
            }
            if s.iter().any(|st| !(st.xi >= 0.0) || !(st.b_shape >= 0.0)) {
                return Err(CmnError::domain(format!("datapoint {n}: negative augmentation parameter")));
            }
        }
        Ok(AugmentationBatch {
            states,
            mu_hat,
            m_hat,
            num_sticks,
            input_dim,
        })
    }

    /// Deterministic inputs (rows of `inputs`) with hard labels; tilts start at 0.
    pub fn from_labels(inputs: &DMatrix<f64>, labels: &[usize], num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(CmnError::shape("one label per input row is required"));
        }
        let mut states = Vec::with_capacity(labels.len());
        let mut mu_hat = Vec::with_capacity(labels.len());
        let mut m_hat = Vec::with_capacity(labels.len());
        for (n, &y) in labels.iter().enumerate() {
            let (kappa, b) = kappa_vector(y, num_classes).map_err(|e| e.at_datapoint(n))?;
            states.push(
                kappa
                    .iter()
                    .zip(&b)
                    .map(|(&kappa, &b_shape)| PGState {
                        b_shape,
                        xi: 0.0,
                        kappa,
                    })
                    .collect(),
            );
            let row: Vec<f64> = inputs.row(n).iter().copied().collect();
            let (mu, mm) = input_moments(&row, None);
            mu_hat.push(mu);
            m_hat.push(mm);
        }
        Ok(AugmentationBatch {
            states,
            mu_hat,
            m_hat,
            num_sticks: num_classes - 1,
            input_dim: inputs.ncols(),
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_sticks(&self) -> usize {
        self.num_sticks
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn set_xi(&mut self, xi: &[Vec<f64>]) -> Result<()> {
        if xi.len() != self.states.len() {
            return Err(CmnError::shape("one tilt vector per datapoint is required"));
        }
        for (states, row) in self.states.iter_mut().zip(xi) {
            if row.len() != states.len() {
                return Err(CmnError::shape("one tilt per stick is required"));
            }
            for (s, &x) in states.iter_mut().zip(row) {
                s.xi = x;
            }
        }
        Ok(())
    }
}

fn check_compatible(post: &MnlrPosterior, batch: &AugmentationBatch) -> Result<()> {
    if post.num_sticks() != batch.num_sticks || post.input_dim != batch.input_dim {
        return Err(CmnError::shape(format!(
            "posterior has {} sticks over {} inputs, batch has {} over {}",
            post.num_sticks(),
            post.input_dim,
            batch.num_sticks,
            batch.input_dim
        )));
    }
    Ok(())
}

/// Optimal tilts `ξⁿ_k = sqrt(Tr(M_k M̂ⁿ))`.
pub fn update_xi(post: &MnlrPosterior, batch: &AugmentationBatch) -> Result<Vec<Vec<f64>>> {
    check_compatible(post, batch)?;
    Ok(batch
        .m_hat
        .iter()
        .map(|m_hat| {
            post.sticks
                .iter()
                .map(|s| trace_of_product(&s.second_moment, m_hat).max(0.0).sqrt())
                .collect()
        })
        .collect())
}

/// Running natural parameters of every stick: `Σₙ κⁿ μ̂ⁿ` and
/// `σ⁻²I + Σₙ E[ωⁿ] M̂ⁿ`, accumulated in datapoint order.
#[derive(Clone, Debug)]
pub struct StickAccumulator {
    lambda1: Vec<Vec<f64>>,
    precision: Vec<Vec<f64>>,
    dim: usize,
    prior_var: f64,
}

impl StickAccumulator {
    pub fn new(num_sticks: usize, input_dim: usize, prior_var: f64) -> Self {
        let dim = input_dim + 1;
        let mut prior = vec![0.0; dim * dim];
        for i in 0..dim {
            prior[i * dim + i] = 1.0 / prior_var;
        }
        StickAccumulator {
            lambda1: vec![vec![0.0; dim]; num_sticks],
            precision: vec![prior; num_sticks],
            dim,
            prior_var,
        }
    }

    /// Adds one datapoint to stick `k`; `m_hat` is the symmetric `dim × dim` second moment.
    pub fn add(&mut self, k: usize, kappa: f64, omega: f64, mu_hat: &[f64], m_hat: &[f64]) {
        if kappa != 0.0 {
            for (l, &m) in self.lambda1[k].iter_mut().zip(mu_hat) {
                *l += kappa * m;
            }
        }
        if omega != 0.0 {
            for (p, &m) in self.precision[k].iter_mut().zip(m_hat) {
                *p += m * omega;
            }
        }
    }

    /// Adds a deterministic input `x̂`, for which `M̂ = x̂x̂ᵀ`.
    pub fn add_point(&mut self, k: usize, kappa: f64, omega: f64, x_hat: &[f64]) {
        if kappa != 0.0 {
            for (l, &m) in self.lambda1[k].iter_mut().zip(x_hat) {
                *l += kappa * m;
            }
        }
        if omega != 0.0 {
            let dim = self.dim;
            let p = &mut self.precision[k];
            for i in 0..dim {
                for j in 0..dim {
                    p[i * dim + j] += (x_hat[i] * x_hat[j]) * omega;
                }
            }
        }
    }

    pub fn finish(self) -> Result<MnlrPosterior> {
        let dim = self.dim;
        let mut naturals = Vec::with_capacity(self.lambda1.len());
        for (l1, p) in self.lambda1.into_iter().zip(self.precision) {
            let mut precision = DMatrix::from_row_slice(dim, dim, &p);
            symmetrize(&mut precision);
            naturals.push(GaussianNatural::new(DVector::from_vec(l1), precision * -0.5)?);
        }
        MnlrPosterior::from_naturals(naturals, dim - 1, self.prior_var)
    }
}

/// Gaussian update of every stick given the batch's `κ`, `E[ω]` and input moments.
///
/// `λ_{k,1} = Σₙ κⁿ_k μ̂ⁿ`, `λ_{k,2} = -½σ⁻²I - ½ Σₙ E[ωⁿ_k] M̂ⁿ`.
pub fn update_beta(prior_var: f64, batch: &AugmentationBatch) -> Result<MnlrPosterior> {
    let mut acc = StickAccumulator::new(batch.num_sticks, batch.input_dim, prior_var);
    for n in 0..batch.len() {
        for (k, st) in batch.states[n].iter().enumerate() {
            acc.add(k, st.kappa, st.mean_omega(), batch.mu_hat[n].as_slice(), batch.m_hat[n].as_slice());
        }
    }
    acc.finish()
}

/// Collapsed bound on `E[ln p(y | ψ)]` with every tilt at its optimum
/// `ξ_k = sqrt(⟨ψ_k²⟩)`: `Σ_k κ_k⟨ψ_k⟩ - b_k ln 2 - b_k ln cosh(ξ_k/2)`.
pub fn expected_loglik_bound(kappa: &[f64], b_shape: &[f64], psi_mean: &[f64], psi_sq: &[f64]) -> f64 {
    kappa
        .iter()
        .zip(b_shape)
        .zip(psi_mean.iter().zip(psi_sq))
        .map(|((&kappa, &b), (&m, &s))| {
            let xi = s.max(0.0).sqrt();
            kappa * m - b * LN_2 - b * ln_cosh(0.5 * xi)
        })
        .sum()
}

/// The same bound at arbitrary tilts:
/// `Σ_k κ_k⟨ψ_k⟩ - b_k ln 2 - E[ω_k]⟨ψ_k²⟩/2 - KL[q(ω_k) || p(ω_k)]`.
///
/// Coincides with [`expected_loglik_bound`] when every `ξ_k² = ⟨ψ_k²⟩`.
pub fn augmented_loglik_bound(states: &[PGState], psi_mean: &[f64], psi_sq: &[f64]) -> f64 {
    states
        .iter()
        .zip(psi_mean.iter().zip(psi_sq))
        .map(|(st, (&m, &s))| {
            if st.b_shape == 0.0 {
                st.kappa * m
            } else {
                st.kappa * m - st.b_shape * LN_2 - 0.5 * st.mean_omega() * s - st.kl()
            }
        })
        .sum()
}

/// Sum over sticks of `KL[q(β_k) || N(0, σ²I)]`.
pub fn beta_kl(post: &MnlrPosterior, prior_var: f64) -> Result<f64> {
    post.sticks
        .iter()
        .map(|s| isotropic_gaussian_kl(&s.mean, &s.cov, prior_var))
        .sum()
}

/// Contribution of this layer's augmented likelihood to the natural
/// parameters of a Gaussian over its (uncertain) input `x`.
///
/// Returns `(Δλ₁, P)` with `Δλ₁ = Σ_k κ_k[μ_k]_{1:m} - E[ω_k][M_k]_{1:m, m+1}` and
/// `P = Σ_k E[ω_k][M_k]_{1:m,1:m}`; the caller subtracts `½P` from `λ₂`.
pub fn latent_input_contribution(post: &MnlrPosterior, states: &[PGState]) -> (DVector<f64>, DMatrix<f64>) {
    let m = post.input_dim;
    let mut lin = DVector::zeros(m);
    let mut quad = DMatrix::zeros(m, m);
    for (s, st) in post.sticks.iter().zip(states) {
        let w = st.mean_omega();
        for i in 0..m {
            lin[i] += st.kappa * s.mean[i] - w * s.second_moment[(i, m)];
        }
        if w != 0.0 {
            for j in 0..m {
                for i in 0..m {
                    quad[(i, j)] += w * s.second_moment[(i, j)];
                }
            }
        }
    }
    (lin, quad)
}

/// `q(x) ∝ p(x)·exp E[l(y, ψ, ω)]` for a Gaussian prior `p(x)`.
pub fn latent_input_posterior(
    prior: &GaussianNatural,
    post: &MnlrPosterior,
    states: &[PGState],
) -> Result<GaussianNatural> {
    if prior.dim() != post.input_dim || states.len() != post.num_sticks() {
        return Err(CmnError::shape("latent prior does not match the layer input"));
    }
    let (lin, quad) = latent_input_contribution(post, states);
    GaussianNatural::new(&prior.lambda1 + lin, &prior.lambda2 - quad * 0.5)
}

/// `E_q[σ(ψ)]` for `ψ ~ N(mean, var)`, by trapezoid quadrature on ±10 sd.
pub fn expected_sigmoid(mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return sigmoid(mean);
    }
    const NODES: usize = 801;
    let sd = var.sqrt();
    let step = 20.0 / (NODES - 1) as f64;
    let mut acc = 0.0;
    for i in 0..NODES {
        let z = -10.0 + i as f64 * step;
        let w = if i == 0 || i == NODES - 1 { 0.5 } else { 1.0 };
        acc += w * (-0.5 * z * z).exp() * sigmoid(mean + sd * z);
    }
    acc * step / (2.0 * std::f64::consts::PI).sqrt()
}

/// Posterior predictive class probabilities for a deterministic input.
///
/// Sticks are independent under `q`, so each class probability is a product
/// of one-dimensional expectations.
pub fn predictive_probs(post: &MnlrPosterior, x: &[f64]) -> Result<DVector<f64>> {
    if x.len() != post.input_dim {
        return Err(CmnError::shape("input does not match the layer dimension"));
    }
    let x_hat = pad_one(x);
    let mut out = DVector::zeros(post.num_classes());
    let mut remainder = 1.0;
    for (k, s) in post.sticks.iter().enumerate() {
        let mean = s.mean.dot(&x_hat);
        let var = (x_hat.transpose() * &s.cov * &x_hat)[(0, 0)].max(0.0);
        let p = expected_sigmoid(mean, var);
        out[k] = remainder * p;
        remainder *= 1.0 - p;
    }
    out[post.num_sticks()] = remainder;
    Ok(out)
}

/// Result of a standalone fit on deterministic inputs.
#[derive(Clone, Debug)]
pub struct MnlrFit {
    pub posterior: MnlrPosterior,
    pub xi: Vec<Vec<f64>>,
    /// Collapsed ELBO after each iteration.
    pub elbo: Vec<f64>,
}

/// Module-level ELBO with tilts at their optimum for `post`.
pub fn mnlr_elbo(post: &MnlrPosterior, batch: &AugmentationBatch) -> Result<f64> {
    check_compatible(post, batch)?;
    let mut total = 0.0;
    for n in 0..batch.len() {
        let (m, s) = post.psi_moments(&batch.mu_hat[n], &batch.m_hat[n]);
        let kappa: Vec<f64> = batch.states[n].iter().map(|st| st.kappa).collect();
        let b: Vec<f64> = batch.states[n].iter().map(|st| st.b_shape).collect();
        total += expected_loglik_bound(&kappa, &b, &m, &s);
    }
    Ok(total - beta_kl(post, post.prior_var)?)
}

/// Alternates `update_xi` / `update_beta` for `iterations` passes starting at the prior.
pub fn fit_mnlr(
    inputs: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    prior_var: f64,
    iterations: usize,
) -> Result<MnlrFit> {
    let mut batch = AugmentationBatch::from_labels(inputs, labels, num_classes)?;
    let mut post = MnlrPosterior::prior(num_classes - 1, inputs.ncols(), prior_var);
    let mut xi = vec![vec![0.0; num_classes - 1]; labels.len()];
    let mut elbo = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        xi = update_xi(&post, &batch)?;
        batch.set_xi(&xi)?;
        post = update_beta(prior_var, &batch)?;
        elbo.push(mnlr_elbo(&post, &batch)?);
    }
    Ok(MnlrFit {
        posterior: post,
        xi,
        elbo,
    })
}
