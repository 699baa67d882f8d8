//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cavi_cmn::cmn::{e_step, elbo, fit, fit_from, init_posterior, m_step};
use cavi_cmn::data::{generate_pinwheel, standardize};
use cavi_cmn::distributions::{
    gaussian_entropy, kappa_vector, mng_expectations, pg_kl, pg_mean, GaussianNatural, MatrixNormalGamma, PGState,
};
use cavi_cmn::experiment::{run_experiment, DataSpec, ExperimentConfig, RunRecord};
use cavi_cmn::experts::{accumulate_stats, expected_gaussian_ll, expert_kl, update_expert, ExpertSuffStats, LatentMoments};
use cavi_cmn::linalg::pad_one;
use cavi_cmn::metrics::steps_to_converge;
use cavi_cmn::mnlr::{
    augmented_loglik_bound, beta_kl, fit_mnlr, input_moments, latent_input_posterior, predictive_probs, update_beta,
    update_xi, AugmentationBatch, MnlrPosterior,
};
use cavi_cmn::special::{log_sigmoid, log_sum_exp, sigmoid};
use cavi_cmn::{CmnModel, Dataset, FitConfig, Hyperparameters, PinwheelParams};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn pinwheel_train(n: usize, seed: u64) -> Dataset {
    let p = PinwheelParams {
        points_per_cluster: n / 5,
        seed,
        ..PinwheelParams::default()
    };
    standardize(&generate_pinwheel(&p).unwrap(), &[]).unwrap().0
}

fn criterion_1() -> Outcome {
    let mut worst_fd: f64 = 0.0;
    let mut worst_kl: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    for b in [1.0, 2.0, 3.5] {
        for i in 1..=100 {
            let xi = 0.1 * i as f64;
            // Laplace exponent: pg_mean = -d/dc [-b ln cosh(sqrt(2c)/2)] at c = ξ²/2
            let f = |c: f64| -b * ((2.0 * c).sqrt() / 2.0).cosh().ln();
            let c = 0.5 * xi * xi;
            let step = 1e-5 * c.max(1e-2);
            let fd = (f(c + step) - f(c - step)) / (2.0 * step);
            worst_fd = worst_fd.max((pg_mean(b, xi).unwrap() + fd).abs());
            let kl = pg_kl(b, xi).unwrap();
            min_kl = min_kl.min(kl);
        }
        worst_kl = worst_kl.max(pg_kl(b, 0.0).unwrap().abs());
    }
    check(
        worst_fd <= 1e-6 && min_kl >= 0.0 && worst_kl <= 1e-12,
        format!("max |pg_mean - FD| = {worst_fd:.2e}, min pg_kl = {min_kl:.2e}, |pg_kl(ξ=0)| = {worst_kl:.1e}"),
    )
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    &b * b.transpose() + DMatrix::identity(n, n) * 0.5
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let h = rng.random_range(1..=3);
        let d = rng.random_range(1..=3);
        let n = rng.random_range(1..=12);
        let m0 = DMatrix::from_fn(h, d + 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v0 = random_spd(&mut rng, d + 1);
        let a0 = 0.5 + 3.0 * rng.random::<f64>();
        let b0 = DVector::from_fn(h, |_, _| 0.2 + 2.0 * rng.random::<f64>());
        let prior = MatrixNormalGamma::new(m0.clone(), v0.clone(), a0, b0.clone()).unwrap();
        let x = DMatrix::from_fn(n, d + 1, |_, j| if j == d { 1.0 } else { rng.sample(StandardNormal) });
        let y = DMatrix::from_fn(n, h, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut stats = ExpertSuffStats::zeros(h, d);
        for i in 0..n {
            let x_hat = x.row(i).transpose();
            stats.push(1.0, &x_hat, &LatentMoments::point(y.row(i).transpose()));
        }
        let got = update_expert(&prior, &stats).unwrap().posterior;

        // textbook normal-gamma regression, one output row at a time
        let v0_inv = v0.clone().try_inverse().unwrap();
        let prec = &v0_inv + x.transpose() * &x;
        let v = prec.clone().try_inverse().unwrap();
        let m = (y.transpose() * &x + &m0 * &v0_inv) * &v;
        let a = a0 + 0.5 * n as f64;
        let b = DVector::from_fn(h, |i, _| {
            let yy = y.column(i).dot(&y.column(i));
            let prior_q = (m0.row(i) * &v0_inv).dot(&m0.row(i));
            let post_q = (m.row(i) * &prec).dot(&m.row(i));
            b0[i] + 0.5 * (yy + prior_q - post_q)
        });
        worst = worst
            .max((&got.m - &m).amax())
            .max((&got.v - &v).amax())
            .max((got.a - a).abs())
            .max((&got.b - &b).amax());
    }
    check(worst <= 1e-8, format!("50 problems, max |Δ| over (M, V, a, b) = {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w_true, c_true) = (1.5, -0.5);
    let xs: Vec<f64> = (0..30).map(|_| rng.sample::<f64, _>(StandardNormal) * 1.5).collect();
    let labels: Vec<usize> = xs
        .iter()
        .map(|&x| if rng.random::<f64>() < sigmoid(w_true * x + c_true) { 0 } else { 1 })
        .collect();
    let sigma = 5.0;
    let inputs = DMatrix::from_column_slice(30, 1, &xs);
    let fitted = fit_mnlr(&inputs, &labels, 2, sigma * sigma, 500).unwrap();

    // exact posterior over (w, c) on a 400 x 400 grid
    let grid = 400;
    let (lo, hi) = (-12.0, 12.0);
    let step = (hi - lo) / (grid - 1) as f64;
    let nodes: Vec<f64> = (0..grid).map(|i| lo + i as f64 * step).collect();
    let mut log_post = Vec::with_capacity(grid * grid);
    for &w in &nodes {
        for &c in &nodes {
            let mut lp = -0.5 * (w * w + c * c) / (sigma * sigma);
            for (x, &y) in xs.iter().zip(&labels) {
                let psi = w * x + c;
                lp += if y == 0 { log_sigmoid(psi) } else { log_sigmoid(-psi) };
            }
            log_post.push(lp);
        }
    }
    let norm = log_sum_exp(&log_post);
    let weights: Vec<f64> = log_post.iter().map(|lp| (lp - norm).exp()).collect();
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let x = -4.0 + 8.0 * i as f64 / 49.0;
        let mut exact = 0.0;
        for (a, &w) in nodes.iter().enumerate() {
            for (b, &c) in nodes.iter().enumerate() {
                exact += weights[a * grid + b] * sigmoid(w * x + c);
            }
        }
        let approx = predictive_probs(&fitted.posterior, &[x]).unwrap()[0];
        worst = worst.max((approx - exact).abs());
    }
    check(worst <= 0.05, format!("sup |variational - quadrature| over 50 inputs = {worst:.4}"))
}

fn max_relative_drop(trace: &[f64]) -> (f64, f64) {
    let mut rel: f64 = 0.0;
    let mut abs: f64 = 0.0;
    for w in trace.windows(2) {
        let drop = w[0] - w[1];
        rel = rel.max(drop / w[0].abs());
        abs = abs.max(drop);
    }
    (rel, abs)
}

fn criterion_4() -> Outcome {
    let data = pinwheel_train(200, 4);
    let mut worst_rel: f64 = f64::NEG_INFINITY;
    let mut k1_rel: f64 = f64::NEG_INFINITY;
    let mut k1_abs: f64 = f64::NEG_INFINITY;
    for seed in 0..8 {
        let config = FitConfig {
            max_sweeps: 300,
            seed,
            ..FitConfig::default()
        };
        let model = CmnModel::with_defaults(2, 5, 10).unwrap();
        let (_, trace) = fit(&model, &data, &config).unwrap();
        worst_rel = worst_rel.max(max_relative_drop(&trace.elbo).0);
        let single = CmnModel::with_defaults(2, 5, 1).unwrap();
        let (_, trace) = fit(&single, &data, &config).unwrap();
        let (rel, abs) = max_relative_drop(&trace.elbo);
        k1_rel = k1_rel.max(rel);
        k1_abs = k1_abs.max(abs);
    }
    check(
        worst_rel <= 1e-6 && k1_rel <= 1e-10,
        format!(
            "8 seeds x 300 sweeps: K=10 worst relative drop {worst_rel:.2e}; \
             K=1 worst relative drop {k1_rel:.2e} (absolute {k1_abs:.2e})"
        ),
    )
}

fn criterion_5() -> Outcome {
    let config = ExperimentConfig::pinwheel_default();
    let record = run_experiment(&config).unwrap();
    let mean = |size: usize, f: fn(&RunRecord) -> f64| {
        let rows: Vec<f64> = record.runs.iter().filter(|r| r.train_size == size).map(f).collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    let acc_1600 = mean(1600, |r| r.accuracy);
    let acc_50 = mean(50, |r| r.accuracy);
    let ece_1600 = mean(1600, |r| r.ece);
    let fit_seconds: f64 = record.runs.iter().map(|r| r.wall_seconds).sum();

    let iris = ExperimentConfig {
        data: DataSpec::Csv {
            path: PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/iris.csv"),
            label_column: None,
            has_header: true,
        },
        train_sizes: vec![],
        test_size: None,
        restarts: 4,
        ..ExperimentConfig::pinwheel_default()
    };
    let iris_record = run_experiment(&iris).unwrap();
    let waic = iris_record.runs.iter().map(|r| r.waic).sum::<f64>() / iris_record.runs.len() as f64;
    let pass = (0.60..=0.85).contains(&acc_1600) && ece_1600 <= 0.15 && acc_1600 >= acc_50 && (-0.35..=0.0).contains(&waic);
    check(
        pass,
        format!(
            "pinwheel accuracy {acc_50:.3} at 50 -> {acc_1600:.3} at 1600, ECE {ece_1600:.3} at 1600, \
             {} fits in {fit_seconds:.0} s; iris WAIC per datapoint {waic:.4}",
            record.runs.len()
        ),
    )
}

fn criterion_6() -> Outcome {
    let ln20 = 20f64.ln();
    let trace = |tau: f64, noise: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..500)
            .map(|t| -100.0 - 40.0 * (-(t as f64) / tau).exp() + noise * 40.0 * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = true;
    let mut worst: f64 = 0.0;
    for tau in [5.0, 10.0, 50.0] {
        let truth = (tau * ln20).ceil();
        let est = steps_to_converge(&trace(tau, 0.0, &mut rng)).unwrap();
        exact &= est.steps as f64 == truth;
        for _ in 0..10 {
            let est = steps_to_converge(&trace(tau, 0.01, &mut rng)).unwrap();
            worst = worst.max((est.steps as f64 - truth).abs() / truth);
        }
    }
    check(
        exact && worst <= 0.10,
        format!("noiseless exact: {exact}; worst relative error over 30 noisy traces {worst:.3}"),
    )
}

fn criterion_7() -> Outcome {
    let config = ExperimentConfig {
        train_sizes: vec![50, 100],
        restarts: 3,
        fit: FitConfig {
            max_sweeps: 40,
            ..FitConfig::default()
        },
        master_seed: 77,
        ..ExperimentConfig::pinwheel_default()
    };
    let raw = || {
        let mut record = run_experiment(&config).unwrap();
        for r in &mut record.runs {
            r.wall_seconds = 0.0;
        }
        serde_json::to_vec(&record.runs).unwrap()
    };
    let (a, b) = (raw(), raw());
    check(a == b, format!("{} bytes of raw run metrics, identical: {}", a.len(), a == b))
}

/// The `K = 1`, `L = 2` network written directly in terms of the layer APIs.
struct Standalone {
    output: MnlrPosterior,
    expert: MatrixNormalGamma,
    latents: Vec<LatentMoments>,
    xi: Vec<Vec<f64>>,
}

impl Standalone {
    fn states(&self, labels: &[usize]) -> Vec<Vec<PGState>> {
        labels
            .iter()
            .zip(&self.xi)
            .map(|(&y, xi)| {
                let (kappa, b) = kappa_vector(y, 2).unwrap();
                vec![PGState {
                    b_shape: b[0],
                    xi: xi[0],
                    kappa: kappa[0],
                }]
            })
            .collect()
    }

    fn batch(&self, labels: &[usize]) -> AugmentationBatch {
        let h = self.expert.output_dim();
        let (mu, mm): (Vec<_>, Vec<_>) = self
            .latents
            .iter()
            .map(|l| input_moments(l.mean.as_slice(), Some(&l.cov)))
            .unzip();
        AugmentationBatch::new(self.states(labels), mu, mm, 1, h).unwrap()
    }

    fn expert_prior_for(&self, x: &[f64]) -> GaussianNatural {
        let e = mng_expectations(&self.expert);
        GaussianNatural::new(&e.precision_mean * pad_one(x), DMatrix::from_diagonal(&e.precision) * -0.5).unwrap()
    }

    fn sweep(&mut self, data: &Dataset, prior: &MatrixNormalGamma, sigma1: f64) {
        let states = self.states(&data.labels);
        for n in 0..data.len() {
            let q = latent_input_posterior(&self.expert_prior_for(&data.row(n)), &self.output, &states[n]).unwrap();
            let (mean, cov) = q.to_moments().unwrap();
            self.latents[n] = LatentMoments { mean, cov };
        }
        self.xi = update_xi(&self.output, &self.batch(&data.labels)).unwrap();
        self.output = update_beta(sigma1 * sigma1, &self.batch(&data.labels)).unwrap();
        let latents: Vec<Vec<LatentMoments>> = self.latents.iter().map(|l| vec![l.clone()]).collect();
        let gamma = vec![vec![1.0]; data.len()];
        let stats = accumulate_stats(&data.features, &latents, &gamma).unwrap();
        self.expert = update_expert(prior, &stats[0]).unwrap().posterior;
    }

    fn elbo(&self, data: &Dataset, prior: &MatrixNormalGamma, sigma1: f64) -> f64 {
        let states = self.states(&data.labels);
        let batch = self.batch(&data.labels);
        let h = self.expert.output_dim();
        let mut total = 0.0;
        for n in 0..data.len() {
            let lat = &self.latents[n];
            let (psi, psi_sq) = self.output.psi_moments(&batch.mu_hat[n], &batch.m_hat[n]);
            let ln_det = cavi_cmn::linalg::SpdFactor::new(&lat.cov).unwrap().ln_det();
            total += expected_gaussian_ll(&self.expert, &data.row(n), &lat.mean, &lat.cov).unwrap()
                + augmented_loglik_bound(&states[n], &psi, &psi_sq)
                + gaussian_entropy(h, ln_det);
        }
        total - beta_kl(&self.output, sigma1 * sigma1).unwrap() - expert_kl(&self.expert, prior).unwrap()
    }
}

fn criterion_8() -> Outcome {
    let raw = generate_pinwheel(&PinwheelParams {
        num_clusters: 2,
        points_per_cluster: 40,
        seed: 8,
        ..PinwheelParams::default()
    })
    .unwrap();
    let data = standardize(&raw, &[]).unwrap().0;
    let model = CmnModel::new(2, 1, 1, 2, Hyperparameters::default()).unwrap();
    let sigma1 = model.hyper.sigma1;
    let prior = model.expert_prior().unwrap();
    let config = FitConfig {
        max_sweeps: 1,
        seed: 5,
        ..FitConfig::default()
    };
    let mut cmn = init_posterior(&model, &data, &config).unwrap();

    // shared start: the sampled expert mean; everything else rebuilt here
    let mut alone = Standalone {
        output: MnlrPosterior::prior(1, 1, sigma1 * sigma1),
        expert: cmn.experts.posteriors[0].clone(),
        latents: Vec::new(),
        xi: vec![vec![0.0]; data.len()],
    };
    let e = mng_expectations(&alone.expert);
    alone.latents = (0..data.len())
        .map(|n| LatentMoments {
            mean: (&e.precision_mean * pad_one(&data.row(n))).component_div(&e.precision),
            cov: DMatrix::from_diagonal(&e.precision.map(|p| 1.0 / p)),
        })
        .collect();
    alone.xi = update_xi(&alone.output, &alone.batch(&data.labels)).unwrap();

    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        e_step(&model, &mut cmn, &data, &config).unwrap();
        m_step(&model, &mut cmn, &data).unwrap();
        alone.sweep(&data, &prior, sigma1);
        let (a, b) = (elbo(&model, &cmn, &data).unwrap(), alone.elbo(&data, &prior, sigma1));
        worst = worst.max((a - b).abs() / b.abs());
        let (so, sa) = (&cmn.output.sticks()[0], &alone.output.sticks()[0]);
        worst = worst.max((so.mean() - sa.mean()).amax()).max((so.cov() - sa.cov()).amax());
        let ec = &cmn.experts.posteriors[0];
        worst = worst
            .max((&ec.m - &alone.expert.m).amax())
            .max((&ec.v - &alone.expert.v).amax())
            .max((&ec.b - &alone.expert.b).amax());
        for n in 0..data.len() {
            let l = cmn.latent(n, 0);
            worst = worst
                .max((&l.mean - &alone.latents[n].mean).amax())
                .max((&l.cov - &alone.latents[n].cov).amax())
                .max((cmn.locals()[n].xi1()[0] - alone.xi[n][0]).abs());
        }
    }
    // the driver loop reaches the same state
    let (fitted, _) = fit_from(
        &model,
        &data,
        init_posterior(&model, &data, &config).unwrap(),
        &FitConfig {
            max_sweeps: 40,
            ..config
        },
    )
    .unwrap();
    worst = worst.max((&fitted.experts.posteriors[0].m - &alone.expert.m).amax());
    check(
        worst <= 1e-8,
        format!("40 sweeps, max difference over ELBO (relative), layers, expert and locals = {worst:.2e}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("1 PG identities", criterion_1, Duration::from_secs(1)),
        ("2 expert conjugacy", criterion_2, Duration::from_secs(5)),
        ("3 MNLR vs grid quadrature", criterion_3, Duration::from_secs(30)),
        ("4 ELBO monotonicity", criterion_4, Duration::from_secs(120)),
        ("5 pinwheel end-to-end", criterion_5, Duration::from_secs(1800)),
        ("6 convergence estimator", criterion_6, Duration::from_secs(1)),
        ("7 determinism", criterion_7, Duration::from_secs(1800)),
        ("8 restriction equivalence", criterion_8, Duration::from_secs(1800)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let pass = outcome.pass && elapsed <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {name}: {} ({:.2} s, budget {} s)",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
