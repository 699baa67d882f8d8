//! Train-size sweeps with random restarts.
//!
//! For each training size the same nested subset is used by every restart,
//! and every restart is evaluated on one fixed test set. Restart `r` fits
//! with seed `derive_seed(master_seed, r)`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmn::{fit, CmnModel, CmnPosterior, FitConfig, FitTrace, Hyperparameters, PredictiveSampler};
use crate::data::{
    doubling_schedule, generate_pinwheel, load_csv, standardize, stratified_split, stratified_split_count, Dataset,
    DatasetManifest, LabelColumn, PinwheelParams,
};
use crate::error::{CmnError, Result};
use crate::metrics::{steps_to_converge, MetricsReport};
use crate::seeds::derive_seed;

pub const RESULTS_SCHEMA_VERSION: u32 = 1;

/// Stream indices for seeds that are not restarts.
const SPLIT_STREAM: u64 = 1 << 32;
const SCHEDULE_STREAM: u64 = (1 << 32) + 1;
const EVAL_STREAM: u64 = (1 << 32) + 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Pinwheel(PinwheelParams),
    Csv {
        path: PathBuf,
        /// Header name of the label column; the last column when absent.
        #[serde(default)]
        label_column: Option<String>,
        #[serde(default = "yes")]
        has_header: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Parameter draws for the predictive and WAIC.
    pub num_samples: usize,
    /// Latent draws per expert and parameter draw.
    pub latent_draws: usize,
    pub ece_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_samples: 64,
            latent_draws: 1,
            ece_bins: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    /// Nested training sizes; empty means the whole training split.
    #[serde(default)]
    pub train_sizes: Vec<usize>,
    /// Held-out points; takes precedence over `test_fraction`.
    #[serde(default)]
    pub test_size: Option<usize>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub num_experts: usize,
    /// Defaults to `L - 1`.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default)]
    pub hyper: Hyperparameters,
    /// The seed inside is replaced per restart.
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_restarts() -> usize {
    16
}

impl ExperimentConfig {
    /// The pinwheel protocol: 2100 points, 500 held out, sizes 50 to 1600.
    pub fn pinwheel_default() -> Self {
        ExperimentConfig {
            data: DataSpec::Pinwheel(PinwheelParams::default()),
            train_sizes: crate::data::doubling_sizes(50, 1600),
            test_size: Some(500),
            test_fraction: default_test_fraction(),
            num_experts: 10,
            latent_dim: None,
            hyper: Hyperparameters::default(),
            fit: FitConfig::default(),
            restarts: default_restarts(),
            eval: EvalConfig::default(),
            standardize: true,
            master_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts < 1 {
            return Err(CmnError::domain("restarts must be at least 1"));
        }
        if self.num_experts < 1 {
            return Err(CmnError::domain("num_experts must be at least 1"));
        }
        if self.eval.num_samples < 1 || self.eval.latent_draws < 1 || self.eval.ece_bins < 1 {
            return Err(CmnError::domain("evaluation counts must be at least 1"));
        }
        self.fit.validate()
    }

    pub fn restart_seed(&self, restart: usize) -> u64 {
        derive_seed(self.master_seed, restart as u64)
    }
}

/// Metrics of one fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub train_size: usize,
    pub restart: usize,
    pub seed: u64,
    /// Test-set accuracy, LPD and ECE.
    pub accuracy: f64,
    pub lpd: f64,
    pub ece: f64,
    /// Per-datapoint WAIC on the training subset.
    pub waic: f64,
    pub steps_to_converge: usize,
    /// False when the ELBO trace showed no exponential decay.
    pub trace_decaying: bool,
    pub final_elbo: f64,
    pub sweeps: usize,
    pub jitter_escalations: u64,
    pub rate_clamps: u64,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        if values.is_empty() {
            return Summary { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub train_size: usize,
    pub runs: usize,
    pub accuracy: Summary,
    pub lpd: Summary,
    pub ece: Summary,
    pub waic: Summary,
    pub steps_to_converge: Summary,
    pub final_elbo: Summary,
    pub wall_seconds: Summary,
}

impl Aggregate {
    fn from_runs(train_size: usize, runs: &[&RunRecord]) -> Aggregate {
        let col = |f: fn(&RunRecord) -> f64| Summary::of(&runs.iter().map(|r| f(r)).collect::<Vec<_>>());
        Aggregate {
            train_size,
            runs: runs.len(),
            accuracy: col(|r| r.accuracy),
            lpd: col(|r| r.lpd),
            ece: col(|r| r.ece),
            waic: col(|r| r.waic),
            steps_to_converge: col(|r| r.steps_to_converge as f64),
            final_elbo: col(|r| r.final_elbo),
            wall_seconds: col(|r| r.wall_seconds),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsRecord {
    pub schema_version: u32,
    /// True when the run stopped on an error; `error` then says why.
    pub partial: bool,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub dataset: DatasetManifest,
    pub test_size: usize,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
}

impl ResultsRecord {
    /// Recomputes the aggregates from the raw runs, grouped by train size in
    /// order of first appearance.
    pub fn recompute_aggregates(runs: &[RunRecord]) -> Vec<Aggregate> {
        let mut sizes: Vec<usize> = Vec::new();
        for r in runs {
            if !sizes.contains(&r.train_size) {
                sizes.push(r.train_size);
            }
        }
        sizes
            .into_iter()
            .map(|s| {
                let group: Vec<&RunRecord> = runs.iter().filter(|r| r.train_size == s).collect();
                Aggregate::from_runs(s, &group)
            })
            .collect()
    }

    /// Checks stored aggregates against the raws to `1e-12`.
    pub fn check_aggregates(&self) -> Result<()> {
        let fresh = Self::recompute_aggregates(&self.runs);
        if fresh.len() != self.aggregates.len() {
            return Err(CmnError::domain("aggregate count does not match the raw runs"));
        }
        let close = |a: &Summary, b: &Summary| {
            (a.mean - b.mean).abs() <= 1e-12 * (1.0 + a.mean.abs()) && (a.std - b.std).abs() <= 1e-12 * (1.0 + a.std.abs())
        };
        for (a, b) in fresh.iter().zip(&self.aggregates) {
            let ok = a.train_size == b.train_size
                && a.runs == b.runs
                && close(&a.accuracy, &b.accuracy)
                && close(&a.lpd, &b.lpd)
                && close(&a.ece, &b.ece)
                && close(&a.waic, &b.waic)
                && close(&a.steps_to_converge, &b.steps_to_converge)
                && close(&a.final_elbo, &b.final_elbo)
                && close(&a.wall_seconds, &b.wall_seconds);
            if !ok {
                return Err(CmnError::domain(format!("aggregates for size {} disagree with raws", a.train_size)));
            }
        }
        Ok(())
    }

    /// Writes `results.json` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.check_aggregates()?;
        std::fs::create_dir_all(dir).map_err(|e| CmnError::io(dir, e))?;
        let json_path = dir.join("results.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&json_path, json).map_err(|e| CmnError::io(&json_path, e))?;
        let csv_path = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CmnError::Format(e.to_string()))?;
        let metrics = ["accuracy", "lpd", "ece", "waic", "steps_to_converge", "final_elbo", "wall_seconds"];
        let mut header = vec!["train_size".to_string(), "runs".to_string()];
        for m in metrics {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        w.write_record(&header).map_err(|e| CmnError::Format(e.to_string()))?;
        for a in &self.aggregates {
            let mut row = vec![a.train_size.to_string(), a.runs.to_string()];
            for s in [
                a.accuracy,
                a.lpd,
                a.ece,
                a.waic,
                a.steps_to_converge,
                a.final_elbo,
                a.wall_seconds,
            ] {
                row.push(format!("{:?}", s.mean));
                row.push(format!("{:?}", s.std));
            }
            w.write_record(&row).map_err(|e| CmnError::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| CmnError::io(&csv_path, e))
    }
}

/// Training subsets (already standardised) and the matching test sets.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub full: Dataset,
    pub splits: Vec<(Dataset, Dataset)>,
    pub test_size: usize,
}

pub fn load_dataset(spec: &DataSpec) -> Result<Dataset> {
    match spec {
        DataSpec::Pinwheel(p) => generate_pinwheel(p),
        DataSpec::Csv {
            path,
            label_column,
            has_header,
        } => {
            let label = match label_column {
                Some(name) => LabelColumn::Named(name.clone()),
                None => LabelColumn::Last,
            };
            load_csv(path, &label, *has_header)
        }
    }
}

/// Split, build the nested schedule and standardise each training subset
/// with its own statistics.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let full = load_dataset(&config.data)?;
    let split_seed = derive_seed(config.master_seed, SPLIT_STREAM);
    let (train, test) = match config.test_size {
        Some(n) => stratified_split_count(&full, n, split_seed)?,
        None => stratified_split(&full, config.test_fraction, split_seed)?,
    };
    let sizes = if config.train_sizes.is_empty() {
        vec![train.len()]
    } else {
        config.train_sizes.clone()
    };
    let subsets = doubling_schedule(&train, &sizes, derive_seed(config.master_seed, SCHEDULE_STREAM))?;
    let test_size = test.len();
    let splits = subsets
        .into_iter()
        .map(|sub| {
            if config.standardize {
                let (tr, mut rest) = standardize(&sub, std::slice::from_ref(&test))?;
                Ok((tr, rest.remove(0)))
            } else {
                Ok((sub, test.clone()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData { full, splits, test_size })
}

pub fn model_for(config: &ExperimentConfig, data: &Dataset) -> Result<CmnModel> {
    CmnModel::new(
        data.dim(),
        config.latent_dim.unwrap_or(data.num_classes.saturating_sub(1)),
        config.num_experts,
        data.num_classes,
        config.hyper,
    )
}

/// Fits one restart and evaluates it.
pub fn run_single(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    restart: usize,
) -> Result<(RunRecord, CmnPosterior, FitTrace)> {
    let model = model_for(config, train)?;
    let seed = config.restart_seed(restart);
    let fit_config = FitConfig {
        seed,
        elbo_record: true,
        ..config.fit.clone()
    };
    let start = Instant::now();
    let (posterior, trace) = fit(&model, train, &fit_config)?;
    let wall_seconds = start.elapsed().as_secs_f64();
    let eval_seed = derive_seed(seed, EVAL_STREAM);
    let sampler = PredictiveSampler::new(&posterior, config.eval.num_samples, config.eval.latent_draws, eval_seed)?;
    let (test_pred, test_ll) = sampler.evaluate(test)?;
    let (_, train_ll) = sampler.evaluate(train)?;
    let test_metrics = MetricsReport::compute(&test_pred, &test_ll, config.eval.ece_bins)?;
    let waic = crate::metrics::waic(&train_ll);
    let (steps, decaying) = if trace.elbo.len() >= 3 {
        let est = steps_to_converge(&trace.elbo)?;
        (est.steps, est.decaying)
    } else {
        (trace.elbo.len(), false)
    };
    let record = RunRecord {
        train_size: train.len(),
        restart,
        seed,
        accuracy: test_metrics.accuracy,
        lpd: test_metrics.lpd,
        ece: test_metrics.ece,
        waic,
        steps_to_converge: steps,
        trace_decaying: decaying,
        final_elbo: trace.final_elbo().unwrap_or(f64::NAN),
        sweeps: trace.sweeps(),
        jitter_escalations: trace.jitter_escalations,
        rate_clamps: trace.rate_clamps,
        wall_seconds,
    };
    Ok((record, posterior, trace))
}

/// Runs the full protocol. Errors are recorded in the returned record with
/// `partial = true` instead of discarding finished runs.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsRecord> {
    config.validate()?;
    let prepared = prepare_data(config)?;
    let mut runs = Vec::new();
    let mut error = None;
    'sizes: for (train, test) in &prepared.splits {
        let results: Vec<Result<RunRecord>> = (0..config.restarts)
            .into_par_iter()
            .map(|r| run_single(config, train, test, r).map(|(rec, _, _)| rec))
            .collect();
        for (r, res) in results.into_iter().enumerate() {
            match res {
                Ok(rec) => runs.push(rec),
                Err(e) => {
                    error = Some(format!("train size {}, restart {r}: {e}", train.len()));
                    break 'sizes;
                }
            }
        }
    }
    let aggregates = ResultsRecord::recompute_aggregates(&runs);
    Ok(ResultsRecord {
        schema_version: RESULTS_SCHEMA_VERSION,
        partial: error.is_some(),
        error,
        config: config.clone(),
        dataset: prepared.full.manifest(match &config.data {
            DataSpec::Pinwheel(p) => Some(p.seed),
            DataSpec::Csv { .. } => None,
        }),
        test_size: prepared.test_size,
        runs,
        aggregates,
    })
}
