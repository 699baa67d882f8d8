//! Mixture of linear experts with Matrix-Normal-Gamma posteriors.
//!
//! Expert `k` maps the padded input `x̂₀ = [x₀; 1]` to the latent `x₁` through
//! `x₁ = A_k x̂₀ + u`, `u ~ N(0, diag(σ_k²))`. Its posterior is refreshed from
//! responsibility-weighted sufficient statistics of `q(x₁ | z = k)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::distributions::{gamma_kl, mng_expectations, MatrixNormalGamma, MngExpectations};
use crate::error::{CmnError, Result};
use crate::linalg::{pad_one, symmetrize, trace_of_product, SpdFactor};

/// Rates below this are clamped after an update.
pub const RATE_FLOOR: f64 = 1e-12;

/// Mean and covariance of a Gaussian over one expert's output.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LatentMoments {
    pub fn point(mean: DVector<f64>) -> Self {
        let h = mean.len();
        LatentMoments {
            mean,
            cov: DMatrix::zeros(h, h),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSuffStats {
    /// `Σₙ γⁿ`
    pub n_eff: f64,
    /// `Σₙ γⁿ x̂₀ x̂₀ᵀ`
    pub sxx: DMatrix<f64>,
    /// `Σₙ γⁿ μ₁ x̂₀ᵀ`
    pub syx: DMatrix<f64>,
    /// `Σₙ γⁿ [Σ₁ + μ₁μ₁ᵀ]ᵢᵢ`
    pub syy_diag: DVector<f64>,
}

impl ExpertSuffStats {
    /// Zero statistics for an expert from `input_dim` inputs to `output_dim` latents.
    pub fn zeros(output_dim: usize, input_dim: usize) -> Self {
        let cols = input_dim + 1;
        ExpertSuffStats {
            n_eff: 0.0,
            sxx: DMatrix::zeros(cols, cols),
            syx: DMatrix::zeros(output_dim, cols),
            syy_diag: DVector::zeros(output_dim),
        }
    }

    /// Adds one datapoint with weight `gamma` and padded input `x_hat`.
    pub fn push(&mut self, gamma: f64, x_hat: &DVector<f64>, latent: &LatentMoments) {
        self.push_slices(gamma, x_hat.as_slice(), latent.mean.as_slice(), latent.cov.as_slice());
    }

    /// As [`push`](Self::push) with a symmetric `h × h` covariance given as a flat slice.
    pub fn push_slices(&mut self, gamma: f64, x_hat: &[f64], mean: &[f64], cov: &[f64]) {
        if gamma == 0.0 {
            return;
        }
        let h = mean.len();
        self.n_eff += gamma;
        for (j, &xj) in x_hat.iter().enumerate() {
            let gx = gamma * xj;
            for (i, &xi) in x_hat.iter().enumerate() {
                self.sxx[(i, j)] += gx * xi;
            }
            for (i, &mi) in mean.iter().enumerate() {
                self.syx[(i, j)] += gx * mi;
            }
        }
        for i in 0..h {
            self.syy_diag[i] += gamma * (cov[i * h + i] + mean[i] * mean[i]);
        }
    }

    pub fn merge(&mut self, other: &ExpertSuffStats) {
        self.n_eff += other.n_eff;
        self.sxx += &other.sxx;
        self.syx += &other.syx;
        self.syy_diag += &other.syy_diag;
    }

    pub fn is_empty(&self) -> bool {
        self.n_eff == 0.0
            && self.sxx.iter().all(|&v| v == 0.0)
            && self.syx.iter().all(|&v| v == 0.0)
            && self.syy_diag.iter().all(|&v| v == 0.0)
    }
}

/// Responsibility-weighted statistics for every expert.
///
/// `latents[n][k]` is `q(x₁ⁿ | zⁿ = k)` and `gamma[n]` the responsibilities of
/// datapoint `n`, which must sum to one within `1e-8`. Summation runs in
/// index order so results do not depend on scheduling.
pub fn accumulate_stats(
    inputs: &DMatrix<f64>,
    latents: &[Vec<LatentMoments>],
    gamma: &[Vec<f64>],
) -> Result<Vec<ExpertSuffStats>> {
    let n = inputs.nrows();
    if latents.len() != n || gamma.len() != n {
        return Err(CmnError::shape("inputs, latents and responsibilities disagree on N"));
    }
    let k = gamma.first().map_or(0, Vec::len);
    let h = latents.first().and_then(|l| l.first()).map_or(0, |l| l.mean.len());
    let mut stats = vec![ExpertSuffStats::zeros(h, inputs.ncols()); k];
    for i in 0..n {
        let g = &gamma[i];
        if g.len() != k || latents[i].len() != k {
            return Err(CmnError::shape(format!("datapoint {i}: expected {k} components")));
        }
        let total: f64 = g.iter().sum();
        if (total - 1.0).abs() > 1e-8 || g.iter().any(|&v| v < 0.0) {
            return Err(CmnError::domain(format!(
                "datapoint {i}: responsibilities sum to {total}, not 1"
            )));
        }
        let row: Vec<f64> = inputs.row(i).iter().copied().collect();
        let x_hat = pad_one(&row);
        for (s, (&w, lat)) in stats.iter_mut().zip(g.iter().zip(&latents[i])) {
            if lat.mean.len() != h {
                return Err(CmnError::shape(format!("datapoint {i}: latent dimension mismatch")));
            }
            s.push(w, &x_hat, lat);
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug)]
pub struct ExpertUpdate {
    pub posterior: MatrixNormalGamma,
    /// Rates that went below [`RATE_FLOOR`] and were clamped.
    pub clamped_rates: u32,
    pub jitter_escalations: u32,
}

/// Conjugate update of one expert.
pub fn update_expert(prior: &MatrixNormalGamma, stats: &ExpertSuffStats) -> Result<ExpertUpdate> {
    let h = prior.output_dim();
    let cols = prior.input_dim();
    if stats.sxx.shape() != (cols, cols) || stats.syx.shape() != (h, cols) || stats.syy_diag.len() != h {
        return Err(CmnError::shape("sufficient statistics do not match the prior"));
    }
    if stats.is_empty() {
        return Ok(ExpertUpdate {
            posterior: prior.clone(),
            clamped_rates: 0,
            jitter_escalations: 0,
        });
    }
    let mut v_inv = prior.v_inv() + &stats.sxx;
    symmetrize(&mut v_inv);
    let factor = SpdFactor::new(&v_inv)?;
    let v = factor.inverse();
    let prior_term = &prior.m * prior.v_inv();
    let m = (&prior_term + &stats.syx) * &v;
    let a = prior.a + 0.5 * stats.n_eff;
    let mut clamped = 0;
    let b = DVector::from_fn(h, |i, _| {
        let post_quad = (m.row(i) * &v_inv).dot(&m.row(i));
        let prior_quad = prior_term.row(i).dot(&prior.m.row(i));
        let bi = prior.b[i] + 0.5 * (stats.syy_diag[i] - post_quad + prior_quad);
        if bi < RATE_FLOOR {
            clamped += 1;
            RATE_FLOOR
        } else {
            bi
        }
    });
    Ok(ExpertUpdate {
        posterior: MatrixNormalGamma::from_parts(m, v, v_inv, a, b)?,
        clamped_rates: clamped,
        jitter_escalations: factor.escalations,
    })
}

/// `E_q(A,Σ) E_q(x₁)[ln N(x₁; A x̂₀, Σ)]` from precomputed expectations.
pub fn expected_gaussian_ll_with(
    exp: &MngExpectations,
    x0_hat: &DVector<f64>,
    x1_mean: &DVector<f64>,
    x1_cov: &DMatrix<f64>,
) -> f64 {
    let h = exp.precision.len();
    let mut quad = 0.0;
    for i in 0..h {
        quad += exp.precision[i] * (x1_cov[(i, i)] + x1_mean[i] * x1_mean[i]);
    }
    let cross = x1_mean.dot(&(&exp.precision_mean * x0_hat));
    let input_quad = (x0_hat.transpose() * &exp.quadratic * x0_hat)[(0, 0)];
    0.5 * exp.ln_det_precision - 0.5 * h as f64 * (2.0 * PI).ln() - 0.5 * (quad - 2.0 * cross + input_quad)
}

/// `E[ln N(x₁; A[x₀;1], Σ)]` under the posterior and a Gaussian `q(x₁)`.
pub fn expected_gaussian_ll(
    post: &MatrixNormalGamma,
    x0: &[f64],
    x1_mean: &DVector<f64>,
    x1_cov: &DMatrix<f64>,
) -> Result<f64> {
    if x0.len() + 1 != post.input_dim() || x1_mean.len() != post.output_dim() {
        return Err(CmnError::shape("expert input or output dimension mismatch"));
    }
    Ok(expected_gaussian_ll_with(&mng_expectations(post), &pad_one(x0), x1_mean, x1_cov))
}

/// `KL[q(A, Σ⁻¹) || p(A, Σ⁻¹)]`: Gamma KLs plus the expected Matrix-Normal KL.
pub fn expert_kl(post: &MatrixNormalGamma, prior: &MatrixNormalGamma) -> Result<f64> {
    if post.m.shape() != prior.m.shape() {
        return Err(CmnError::shape("posterior and prior shapes differ"));
    }
    let cols = post.input_dim() as f64;
    let ln_det_v = SpdFactor::new(&post.v)?.ln_det();
    let ln_det_v0 = SpdFactor::new(&prior.v)?.ln_det();
    let trace = trace_of_product(prior.v_inv(), &post.v);
    let diff = &post.m - &prior.m;
    let mut kl = 0.0;
    for i in 0..post.output_dim() {
        kl += gamma_kl(post.a, post.b[i], prior.a, prior.b[i]);
        let maha = (diff.row(i) * prior.v_inv()).dot(&diff.row(i));
        kl += 0.5 * (trace - cols + post.a / post.b[i] * maha + ln_det_v0 - ln_det_v);
    }
    Ok(kl.max(0.0))
}

/// The `K` expert posteriors together with their shared prior.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub posteriors: Vec<MatrixNormalGamma>,
    pub prior: MatrixNormalGamma,
}

impl ExpertBank {
    pub fn from_prior(prior: MatrixNormalGamma, k: usize) -> Self {
        ExpertBank {
            posteriors: vec![prior.clone(); k],
            prior,
        }
    }

    pub fn len(&self) -> usize {
        self.posteriors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posteriors.is_empty()
    }

    pub fn expectations(&self) -> Vec<MngExpectations> {
        self.posteriors.iter().map(mng_expectations).collect()
    }

    pub fn kl(&self) -> Result<f64> {
        self.posteriors.iter().map(|p| expert_kl(p, &self.prior)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, StandardNormal};
    use statrs::function::gamma::ln_gamma;

    fn hand_stats() -> ExpertSuffStats {
        let x = DMatrix::from_row_slice(1, 1, &[2.0]);
        let lat = vec![vec![LatentMoments {
            mean: DVector::from_vec(vec![3.0]),
            cov: DMatrix::from_element(1, 1, 0.5),
        }]];
        accumulate_stats(&x, &lat, &[vec![1.0]]).unwrap().remove(0)
    }

    #[test]
    fn single_point_statistics_by_hand() {
        let s = hand_stats();
        assert_eq!(s.n_eff, 1.0);
        assert_eq!(s.sxx, DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 1.0]));
        assert_eq!(s.syx, DMatrix::from_row_slice(1, 2, &[6.0, 3.0]));
        assert_eq!(s.syy_diag[0], 9.5);
    }

    #[test]
    fn zero_responsibility_gives_zero_stats() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let lat = vec![vec![LatentMoments::point(DVector::from_vec(vec![1.0])); 2]; 2];
        let stats = accumulate_stats(&x, &lat, &[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(stats[1].is_empty());
        assert!(!stats[0].is_empty());
    }

    #[test]
    fn responsibilities_must_be_normalised() {
        let x = DMatrix::from_row_slice(1, 1, &[1.0]);
        let lat = vec![vec![LatentMoments::point(DVector::from_vec(vec![1.0])); 2]];
        assert!(matches!(
            accumulate_stats(&x, &lat, &[vec![0.5, 0.4]]),
            Err(CmnError::Domain(_))
        ));
    }

    #[test]
    fn stats_are_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(6, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lat: Vec<Vec<LatentMoments>> = (0..6)
            .map(|_| {
                (0..2)
                    .map(|_| LatentMoments {
                        mean: DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal)),
                        cov: DMatrix::identity(2, 2) * 0.3,
                    })
                    .collect()
            })
            .collect();
        let gamma: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let p: f64 = rng.random();
                vec![p, 1.0 - p]
            })
            .collect();
        let all = accumulate_stats(&x, &lat, &gamma).unwrap();
        let mut first = accumulate_stats(&x.rows(0, 3).into_owned(), &lat[..3], &gamma[..3]).unwrap();
        let second = accumulate_stats(&x.rows(3, 3).into_owned(), &lat[3..], &gamma[3..]).unwrap();
        for (f, s) in first.iter_mut().zip(&second) {
            f.merge(s);
        }
        for (a, b) in all.iter().zip(&first) {
            assert!((a.sxx.clone() - &b.sxx).norm() < 1e-12);
            assert!((a.syx.clone() - &b.syx).norm() < 1e-12);
            assert!((a.syy_diag.clone() - &b.syy_diag).norm() < 1e-12);
            assert!((a.n_eff - b.n_eff).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_stats_return_prior_exactly() {
        let prior = MatrixNormalGamma::prior(2, 3, 10.0, 2.0, 1.0).unwrap();
        let up = update_expert(&prior, &ExpertSuffStats::zeros(2, 3)).unwrap();
        assert_eq!(up.posterior, prior);
    }

    #[test]
    fn hand_solved_single_point_update() {
        let prior = MatrixNormalGamma::prior(1, 1, 1.0, 2.0, 1.0).unwrap();
        let post = update_expert(&prior, &hand_stats()).unwrap().posterior;
        assert_eq!(post.v_inv(), &DMatrix::from_row_slice(2, 2, &[5.0, 2.0, 2.0, 2.0]));
        assert_eq!(post.a, 2.5);
        // V = [[2,-2],[-2,5]]/6, M = [6,3]·V = [1, 0.5]
        assert!((post.m[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((post.m[(0, 1)] - 0.5).abs() < 1e-14);
        // M V⁻¹ Mᵀ = [1,.5]·[[5,2],[2,2]]·[1,.5]ᵀ = 5 + 2 + 0.5 = 7.5
        assert!((post.b[0] - (1.0 + 0.5 * (9.5 - 7.5))).abs() < 1e-13);
    }

    #[test]
    fn point_mass_log_density() {
        let m = DMatrix::from_row_slice(2, 2, &[1.5, -0.5, 0.2, 0.3]);
        let b = DVector::from_vec(vec![2.0, 0.5]);
        let a = 1e12;
        let post = MatrixNormalGamma::from_parts(
            m.clone(),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            a,
            b.map(|bi| bi * a),
        )
        .unwrap();
        let x0 = [0.7];
        let x1 = DVector::from_vec(vec![1.0, -0.4]);
        let ll = expected_gaussian_ll(&post, &x0, &x1, &DMatrix::zeros(2, 2)).unwrap();
        let mean = &m * pad_one(&x0);
        let mut direct = 0.0;
        for i in 0..2 {
            let prec = 1.0 / b[i];
            direct += 0.5 * (prec / (2.0 * PI)).ln() - 0.5 * prec * (x1[i] - mean[i]).powi(2);
        }
        // digamma(a) - ln a → 0 as a → ∞ (error ~ 1/(2a))
        assert!((ll - direct).abs() < 1e-8, "{ll} vs {direct}");
    }

    #[test]
    fn zero_residual_is_maximal() {
        let m = DMatrix::from_row_slice(1, 2, &[2.0, 1.0]);
        let post = MatrixNormalGamma::from_parts(
            m.clone(),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            3.0,
            DVector::from_element(1, 1.5),
        )
        .unwrap();
        let e = mng_expectations(&post);
        let x_hat = pad_one(&[0.5]);
        let mean = &m * &x_hat;
        let ll = expected_gaussian_ll_with(&e, &x_hat, &mean, &DMatrix::zeros(1, 1));
        let expected = 0.5 * e.ln_det_precision - 0.5 * (2.0 * PI).ln();
        assert!((ll - expected).abs() < 1e-13);
    }

    #[test]
    fn column_covariance_penalty_by_finite_difference() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -0.3, 0.2, -1.0, 0.8]);
        let v = DMatrix::identity(3, 3) * 0.4;
        let b = DVector::from_vec(vec![1.5, 0.8]);
        let a = 2.5;
        let x0 = [0.3, -1.2];
        let x1 = DVector::from_vec(vec![0.4, 0.1]);
        let cov = DMatrix::identity(2, 2) * 0.2;
        let base = MatrixNormalGamma::new(m.clone(), v.clone(), a, b.clone()).unwrap();
        let delta = 1e-3;
        let bumped = MatrixNormalGamma::new(m, v + DMatrix::identity(3, 3) * delta, a, b).unwrap();
        let diff = expected_gaussian_ll(&base, &x0, &x1, &cov).unwrap()
            - expected_gaussian_ll(&bumped, &x0, &x1, &cov).unwrap();
        // h·V enters E[AᵀΣ⁻¹A] so the drop is ½·h·δ·|x̂₀|²
        let x_hat = pad_one(&x0);
        let expected = 0.5 * 2.0 * delta * x_hat.norm_squared();
        assert!((diff - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_at_prior_and_gamma_only_decomposition() {
        let prior = MatrixNormalGamma::prior(2, 2, 10.0, 2.0, 1.0).unwrap();
        assert!(expert_kl(&prior, &prior).unwrap().abs() < 1e-12);
        let mut post = prior.clone();
        post.a = 3.5;
        post.b = DVector::from_vec(vec![0.7, 2.2]);
        let expected = gamma_kl(3.5, 0.7, 2.0, 1.0) + gamma_kl(3.5, 2.2, 2.0, 1.0);
        assert!((expert_kl(&post, &prior).unwrap() - expected).abs() < 1e-12);
    }

    fn ln_gamma_pdf(x: f64, a: f64, b: f64) -> f64 {
        a * b.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - b * x
    }

    fn ln_mvn(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let d = x.len() as f64;
        let chol = cov.clone().cholesky().unwrap();
        let diff = x - mean;
        let sol = chol.solve(&diff);
        let ln_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (d * (2.0 * PI).ln() + ln_det + diff.dot(&sol))
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let prior = MatrixNormalGamma::prior(2, 1, 3.0, 2.0, 1.0).unwrap();
        let post = MatrixNormalGamma::new(
            DMatrix::from_row_slice(2, 2, &[0.8, -0.4, 1.1, 0.2]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
            4.0,
            DVector::from_vec(vec![2.5, 1.2]),
        )
        .unwrap();
        let chol = post.v.clone().cholesky().unwrap().l();
        let draws = 100_000;
        let (mut acc, mut acc2) = (0.0, 0.0);
        for _ in 0..draws {
            let mut v = 0.0;
            for i in 0..2 {
                let tau: f64 = Gamma::new(post.a, 1.0 / post.b[i]).unwrap().sample(&mut rng);
                let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mean_i: DVector<f64> = post.m.row(i).transpose();
                let row = &mean_i + &chol * z / tau.sqrt();
                v += ln_gamma_pdf(tau, post.a, post.b[i]) + ln_mvn(&row, &mean_i, &(&post.v / tau));
                let prior_mean: DVector<f64> = prior.m.row(i).transpose();
                v -= ln_gamma_pdf(tau, prior.a, prior.b[i]) + ln_mvn(&row, &prior_mean, &(&prior.v / tau));
            }
            acc += v;
            acc2 += v * v;
        }
        let mc = acc / draws as f64;
        let se = ((acc2 / draws as f64 - mc * mc) / draws as f64).sqrt();
        let kl = expert_kl(&post, &prior).unwrap();
        assert!((kl - mc).abs() < 3.0 * se, "kl {kl} vs MC {mc} ± {se}");
    }

    #[test]
    fn exchangeable_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 12;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lat: Vec<Vec<LatentMoments>> = (0..n)
            .map(|_| vec![LatentMoments::point(DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal)))])
            .collect();
        let gamma = vec![vec![1.0]; n];
        let prior = MatrixNormalGamma::prior(2, 2, 10.0, 2.0, 1.0).unwrap();
        let a = update_expert(&prior, &accumulate_stats(&x, &lat, &gamma).unwrap()[0]).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let xp = DMatrix::from_fn(n, 2, |i, j| x[(perm[i], j)]);
        let latp: Vec<_> = perm.iter().map(|&i| lat[i].clone()).collect();
        let b = update_expert(&prior, &accumulate_stats(&xp, &latp, &gamma).unwrap()[0]).unwrap();
        assert!((a.posterior.m.clone() - &b.posterior.m).norm() < 1e-12);
        assert!((a.posterior.b.clone() - &b.posterior.b).norm() < 1e-12);
    }

    #[test]
    fn posterior_mean_approaches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1000;
        let truth = DMatrix::from_row_slice(2, 3, &[1.5, -0.7, 0.3, -0.2, 0.9, -1.0]);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lat: Vec<Vec<LatentMoments>> = (0..n)
            .map(|i| {
                let xh = pad_one(&[x[(i, 0)], x[(i, 1)]]);
                let noise = DVector::from_fn(2, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
                vec![LatentMoments::point(&truth * xh + noise)]
            })
            .collect();
        let prior = MatrixNormalGamma::prior(2, 2, 10.0, 2.0, 1.0).unwrap();
        let stats = accumulate_stats(&x, &lat, &vec![vec![1.0]; n]).unwrap();
        let post = update_expert(&prior, &stats[0]).unwrap().posterior;
        let ls = &stats[0].syx * stats[0].sxx.clone().try_inverse().unwrap();
        assert!((post.m - ls).abs().max() < 0.05);
    }
}
