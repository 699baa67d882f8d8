//! Command-line runner: data generation, single fits, evaluation, the full
//! train-size protocol and ELBO traces.
//!
//! The worker thread count follows `RAYON_NUM_THREADS`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cavi_cmn::cmn::{fit, load_posterior, save_posterior, PosteriorFile};
use cavi_cmn::data::{generate_pinwheel, load_csv, standardize, LabelColumn};
use cavi_cmn::experiment::{run_experiment, DataSpec, EvalConfig, ExperimentConfig};
use cavi_cmn::{CmnError, CmnModel, Dataset, FitConfig, Hyperparameters, MetricsReport, PinwheelParams, PredictiveSampler};

#[derive(Parser)]
#[command(name = "cavi-cmn", version, about = "Conditional mixture networks fitted by coordinate ascent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a pinwheel dataset as CSV.
    Generate(GenerateArgs),
    /// Fit one model and save its posterior.
    Fit(FitArgs),
    /// Evaluate a saved posterior on a labelled CSV and print JSON metrics.
    Eval(EvalArgs),
    /// Run the train-size protocol with restarts and write results.
    Bench(BenchArgs),
    /// Fit one model and write its ELBO trace as CSV.
    Trace(TraceArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long, default_value_t = 0.7)]
    radial: f64,
    #[arg(long, default_value_t = 0.3)]
    tangential: f64,
    #[arg(long, default_value_t = 0.2)]
    rate: f64,
    /// Total number of points; must be a multiple of `--clusters`.
    #[arg(long, default_value_t = 2100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Labelled CSV; the label is the last column unless `--label-column` is given.
    #[arg(long)]
    data: PathBuf,
    /// Header name of the label column.
    #[arg(long)]
    label_column: Option<String>,
    /// The file has no header row.
    #[arg(long)]
    no_header: bool,
}

impl DataArgs {
    fn load(&self) -> cavi_cmn::Result<Dataset> {
        let label = match &self.label_column {
            Some(name) => LabelColumn::Named(name.clone()),
            None => LabelColumn::Last,
        };
        load_csv(&self.data, &label, !self.no_header)
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Number of experts.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Latent dimension; defaults to the number of classes minus one.
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long, default_value_t = 500)]
    sweeps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    v0: f64,
    #[arg(long, default_value_t = 2.0)]
    a0: f64,
    #[arg(long, default_value_t = 1.0)]
    b0: f64,
    #[arg(long, default_value_t = 5.0)]
    sigma0: f64,
    #[arg(long, default_value_t = 5.0)]
    sigma1: f64,
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    /// Stop once the relative ELBO change falls below this.
    #[arg(long)]
    rel_tol: Option<f64>,
    /// Leave features unscaled.
    #[arg(long)]
    no_standardize: bool,
}

impl ModelArgs {
    fn hyper(&self) -> Hyperparameters {
        Hyperparameters {
            v0: self.v0,
            a0: self.a0,
            b0: self.b0,
            sigma0: self.sigma0,
            sigma1: self.sigma1,
        }
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            max_sweeps: self.sweeps,
            seed: self.seed,
            init_scale: self.init_scale,
            rel_tol: self.rel_tol,
            ..FitConfig::default()
        }
    }

    fn model(&self, data: &Dataset) -> cavi_cmn::Result<CmnModel> {
        CmnModel::new(
            data.dim(),
            self.latent_dim.unwrap_or(data.num_classes.saturating_sub(1)),
            self.k,
            data.num_classes,
            self.hyper(),
        )
    }

    fn prepare(&self, data: Dataset) -> cavi_cmn::Result<Dataset> {
        if self.no_standardize {
            Ok(data)
        } else {
            Ok(standardize(&data, &[])?.0)
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Posterior file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    posterior: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Parameter draws for the predictive and WAIC.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    latent_draws: usize,
    #[arg(long, default_value_t = 10)]
    ece_bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON experiment config; the pinwheel protocol when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for `results.json` and `summary.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    sweeps: Option<usize>,
    /// Comma-separated training sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// CSV with columns `sweep,elbo,seconds`.
    #[arg(long)]
    out: PathBuf,
}

fn generate(args: &GenerateArgs) -> cavi_cmn::Result<()> {
    if args.clusters == 0 || args.n % args.clusters != 0 {
        return Err(CmnError::domain(format!(
            "--n {} is not a multiple of --clusters {}",
            args.n, args.clusters
        )));
    }
    let data = generate_pinwheel(&PinwheelParams {
        num_clusters: args.clusters,
        radial_deviation: args.radial,
        tangential_deviation: args.tangential,
        angular_rate: args.rate,
        points_per_cluster: args.n / args.clusters,
        seed: args.seed,
    })?;
    data.write_csv(&args.out)?;
    println!("wrote {} rows to {}", data.len(), args.out.display());
    Ok(())
}

fn fit_command(args: &FitArgs) -> cavi_cmn::Result<()> {
    let data = args.model.prepare(args.data.load()?)?;
    let model = args.model.model(&data)?;
    let (posterior, trace) = fit(&model, &data, &args.model.fit_config())?;
    let file = PosteriorFile {
        model,
        posterior,
        seed: args.model.seed,
        standardization: data.standardization.clone(),
        class_names: data.class_names.clone(),
    };
    save_posterior(&args.out, &file)?;
    let final_elbo = trace.final_elbo().unwrap_or(f64::NAN);
    println!("final ELBO {final_elbo:.6} after {} sweeps", trace.sweeps());
    if trace.jitter_escalations > 0 || trace.rate_clamps > 0 {
        eprintln!(
            "warning: {} jitter escalations, {} clamped noise rates",
            trace.jitter_escalations, trace.rate_clamps
        );
    }
    Ok(())
}

fn eval_command(args: &EvalArgs) -> cavi_cmn::Result<()> {
    let file = load_posterior(&args.posterior)?;
    let mut data = args.data.load()?;
    if let Some(names) = &file.class_names {
        data = data.with_class_order(names)?;
    }
    if let Some(st) = &file.standardization {
        data.features = st.apply(&data.features)?;
    }
    if data.dim() != file.model.input_dim {
        return Err(CmnError::shape(format!(
            "posterior expects {} features, data has {}",
            file.model.input_dim,
            data.dim()
        )));
    }
    let eval = EvalConfig {
        num_samples: args.samples,
        latent_draws: args.latent_draws,
        ece_bins: args.ece_bins,
    };
    let sampler = PredictiveSampler::new(&file.posterior, eval.num_samples, eval.latent_draws, args.seed)?;
    let (pred, ll) = sampler.evaluate(&data)?;
    let report = MetricsReport::compute(&pred, &ll, eval.ece_bins)?;
    let out = serde_json::json!({
        "n": data.len(),
        "accuracy": report.accuracy,
        "lpd": report.lpd,
        "ece": report.ece,
        "waic": report.waic,
        "samples": eval.num_samples,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn bench_config(args: &BenchArgs) -> cavi_cmn::Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CmnError::io(path, e))?;
            let mut config: ExperimentConfig = serde_json::from_str(&text)?;
            // relative CSV paths are resolved against the config file
            if let DataSpec::Csv { path: data, .. } = &mut config.data {
                if data.is_relative() {
                    *data = path.parent().unwrap_or(Path::new(".")).join(&*data);
                }
            }
            config
        }
        None => ExperimentConfig::pinwheel_default(),
    };
    if let Some(r) = args.restarts {
        config.restarts = r;
    }
    if let Some(s) = args.sweeps {
        config.fit.max_sweeps = s;
    }
    if let Some(sizes) = &args.sizes {
        config.train_sizes = sizes.clone();
    }
    if let Some(k) = args.k {
        config.num_experts = k;
    }
    if let Some(seed) = args.master_seed {
        config.master_seed = seed;
    }
    Ok(config)
}

fn bench(args: &BenchArgs) -> cavi_cmn::Result<()> {
    let config = bench_config(args)?;
    let record = run_experiment(&config)?;
    record.write(&args.out)?;
    for a in &record.aggregates {
        println!(
            "n={:<5} accuracy {:.3} ± {:.3}  lpd {:.3}  ece {:.3}  waic {:.4}  steps {:.1}",
            a.train_size, a.accuracy.mean, a.accuracy.std, a.lpd.mean, a.ece.mean, a.waic.mean, a.steps_to_converge.mean
        );
    }
    println!("wrote {}", args.out.join("results.json").display());
    match record.error {
        Some(e) => Err(CmnError::domain(format!("partial results written: {e}"))),
        None => Ok(()),
    }
}

fn trace_command(args: &TraceArgs) -> cavi_cmn::Result<()> {
    let data = args.model.prepare(args.data.load()?)?;
    let model = args.model.model(&data)?;
    let (_, trace) = fit(&model, &data, &args.model.fit_config())?;
    let mut out = std::fs::File::create(&args.out).map_err(|e| CmnError::io(&args.out, e))?;
    let mut text = String::from("sweep,elbo,seconds\n");
    for (i, (e, t)) in trace.elbo.iter().zip(&trace.wall_time).enumerate() {
        text.push_str(&format!("{},{e:?},{t:?}\n", i + 1));
    }
    out.write_all(text.as_bytes()).map_err(|e| CmnError::io(&args.out, e))?;
    println!("wrote {} sweeps to {}", trace.sweeps(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Fit(a) => fit_command(a),
        Command::Eval(a) => eval_command(a),
        Command::Bench(a) => bench(a),
        Command::Trace(a) => trace_command(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
