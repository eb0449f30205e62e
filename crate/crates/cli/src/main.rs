//! `cvel`: causal direction discovery with causal velocities.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 when more
//! than 10% of the datasets in a benchmark failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use causal_velocity::dataset::{self, PreprocessConfig, TuebingenFilter};
use causal_velocity::flow::IntegratorConfig;
use causal_velocity::gof::{self, DiscoverConfig, Estimator, GofConfig};
use causal_velocity::harness::{self, BenchmarkConfig, DataSource, EstimatorKind, ScoreEvalConfig};
use causal_velocity::scores::AnalyticConfig;
use causal_velocity::synth::{self, BenchmarkFamily, BenchmarkSpec};
use causal_velocity::{Direction, Error, VelocityFamily, VelocityModel};
use clap::{Args, Parser, Subcommand, ValueEnum};

const MAX_ERROR_FRACTION: f64 = 0.1;

#[derive(Parser)]
#[command(name = "cvel", version, about = "Bivariate causal discovery with causal velocities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decide the causal direction of one dataset (CSV with header x,y).
    Discover {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate or run benchmarks.
    Benchmark {
        #[command(subcommand)]
        action: BenchmarkAction,
    },
    /// Fit a dataset and export counterfactual curves through its points.
    Curves {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        /// Use a saved model instead of fitting (its direction is X→Y
        /// unless --reverse is given).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        reverse: bool,
        /// Number of observations to draw curves through.
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 61)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare estimated scores to closed-form ones on Gaussian-noise data.
    ScoreEval {
        #[arg(long, value_enum, default_value_t = GaussFamily::AnmGauss)]
        benchmark: GaussFamily,
        /// Sample sizes (repeatable).
        #[arg(long = "n", num_args = 1.., default_values_t = [100usize, 1000])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        datasets: usize,
        /// Estimators to evaluate (repeatable).
        #[arg(long, value_enum, num_args = 1.., default_values_t = [EstimatorArg::Stein])]
        estimator: Vec<EstimatorArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchmarkAction {
    /// Write synthetic datasets and a manifest.
    Generate {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run discovery over a benchmark and write report.json and results.csv.
    Run {
        /// Directory written by `benchmark generate`.
        #[arg(long, conflicts_with_all = ["tuebingen", "benchmark"])]
        data: Option<PathBuf>,
        /// Directory with pairNNNN.txt files and pairmeta.txt.
        #[arg(long, conflicts_with = "benchmark")]
        tuebingen: Option<PathBuf>,
        #[arg(long)]
        continuous_only: bool,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Weight accuracy and AUDRC by pair weights (default).
        #[arg(long, overrides_with = "unweighted")]
        weighted: bool,
        #[arg(long)]
        unweighted: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic benchmark family, generated on the fly.
    #[arg(long, value_enum)]
    benchmark: Option<BenchArg>,
    #[arg(long, default_value_t = 100)]
    datasets: usize,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long)]
    sigma_theta: Option<f64>,
    #[arg(long)]
    sigma_y: Option<f64>,
}

#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long, value_enum, default_value_t = EstimatorArg::Stein)]
    estimator: EstimatorArg,
    #[arg(long, value_enum, default_value_t = FamilyArg::VAnm)]
    family: FamilyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of marginal extremes left out of the loss.
    #[arg(long, default_value_t = 0.0)]
    trim: f64,
    #[arg(long)]
    subsample_to: Option<usize>,
    #[arg(long)]
    penalty_weight: Option<f64>,
    /// Base rate for basis families, fixed rate for network families.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Stein,
    Kde,
    Analytic,
}

impl From<EstimatorArg> for EstimatorKind {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Stein => EstimatorKind::Stein,
            EstimatorArg::Kde => EstimatorKind::Kde,
            EstimatorArg::Analytic => EstimatorKind::Analytic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    BLin,
    BQuad,
    BLinExp,
    BQuadExp,
    VAnm,
    VLsnm,
    VNn,
}

impl From<FamilyArg> for VelocityFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::BLin => VelocityFamily::BLin,
            FamilyArg::BQuad => VelocityFamily::BQuad,
            FamilyArg::BLinExp => VelocityFamily::BLinExp,
            FamilyArg::BQuadExp => VelocityFamily::BQuadExp,
            FamilyArg::VAnm => VelocityFamily::VAnm,
            FamilyArg::VLsnm => VelocityFamily::VLsnm,
            FamilyArg::VNn => VelocityFamily::VNn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchArg {
    Velocity,
    Sigmoid,
    Anm,
    Lsnm,
    AnmGauss,
    LsnmGauss,
}

impl From<BenchArg> for BenchmarkFamily {
    fn from(b: BenchArg) -> Self {
        match b {
            BenchArg::Velocity => BenchmarkFamily::Velocity,
            BenchArg::Sigmoid => BenchmarkFamily::Sigmoid,
            BenchArg::Anm => BenchmarkFamily::Anm,
            BenchArg::Lsnm => BenchmarkFamily::Lsnm,
            BenchArg::AnmGauss => BenchmarkFamily::AnmGauss,
            BenchArg::LsnmGauss => BenchmarkFamily::LsnmGauss,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GaussFamily {
    AnmGauss,
    LsnmGauss,
}

enum Failure {
    Config(String),
    Data(Error),
    TooManyErrors { errors: usize, total: usize },
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::TooManyErrors { .. } => 4,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn config_err(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

impl FitArgs {
    fn discover_config(&self) -> std::result::Result<DiscoverConfig, Failure> {
        let family = VelocityFamily::from(self.family);
        let mut gof = GofConfig::default();
        if let Some(w) = self.penalty_weight {
            gof.penalty_weight = w;
        }
        if let Some(it) = self.iters {
            gof.max_iters = it;
        }
        if let Some(lr) = self.lr {
            if family.is_basis() {
                gof.base_lr = lr;
            } else {
                gof.mlp_lr = lr;
            }
        }
        gof.validate().map_err(config_err)?;
        let preprocess = PreprocessConfig {
            trim_fraction: self.trim,
            subsample_to: self.subsample_to,
            rng_seed: self.seed,
            ..PreprocessConfig::default()
        };
        preprocess.validate().map_err(config_err)?;
        Ok(DiscoverConfig { preprocess, gof })
    }

    fn estimator(&self) -> std::result::Result<Estimator<'static>, Failure> {
        match self.estimator {
            EstimatorArg::Stein => Ok(Estimator::stein()),
            EstimatorArg::Kde => Ok(Estimator::kde()),
            EstimatorArg::Analytic => Err(Failure::Config(
                "analytic scores are only available for generated Gaussian benchmarks".into(),
            )),
        }
    }
}

impl SynthArgs {
    fn spec(&self, seed: u64) -> Option<BenchmarkSpec> {
        self.benchmark.map(|b| {
            let mut spec = BenchmarkSpec::new(b.into(), self.datasets, self.n, seed);
            if let Some(s) = self.sigma_theta {
                spec.sigma_theta = s;
            }
            if let Some(s) = self.sigma_y {
                spec.sigma_y = s;
            }
            spec
        })
    }
}

fn make_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("cannot create {}: {e}", dir.display())))
}

fn discover_cmd(input: &Path, fit: &FitArgs, out: &Path) -> Outcome {
    let config = fit.discover_config()?;
    let est = fit.estimator()?;
    make_dir(out)?;
    let pair = dataset::read_pair(input)?;
    let result = gof::discover(&pair, &est, fit.family.into(), &config, fit.seed)?;
    result.write_json(out.join("fit.json"))?;
    result.write_trace_csv(out.join("trace.csv"))?;
    println!(
        "{}: {} (loss_xy {:.6e}, loss_yx {:.6e}, confidence {:.6e}{}{})",
        result.id,
        result.decision,
        result.loss_xy,
        result.loss_yx,
        result.confidence,
        if result.tie { ", tie" } else { "" },
        if result.low_confidence { ", low confidence" } else { "" },
    );
    Ok(())
}

fn generate_cmd(synth_args: &SynthArgs, seed: u64, out: &Path) -> Outcome {
    let spec = synth_args
        .spec(seed)
        .ok_or_else(|| Failure::Config("--benchmark is required".into()))?;
    spec.validate().map_err(config_err)?;
    make_dir(out)?;
    let manifest = synth::write_benchmark(&spec, out)?;
    println!("wrote {} datasets to {}", manifest.datasets.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_cmd(
    data: Option<&Path>,
    tuebingen: Option<&Path>,
    continuous_only: bool,
    synth_args: &SynthArgs,
    fit: &FitArgs,
    workers: usize,
    weighted: bool,
    out: &Path,
) -> Outcome {
    let discover = fit.discover_config()?;
    let estimator = EstimatorKind::from(fit.estimator);
    let source = match (data, tuebingen, synth_args.spec(fit.seed)) {
        (Some(dir), None, None) => DataSource::Pairs(synth::read_benchmark(dir)?.1),
        (None, Some(dir), None) => {
            let filter = if continuous_only {
                TuebingenFilter::ContinuousOnly
            } else {
                TuebingenFilter::Standard
            };
            DataSource::Pairs(dataset::load_tuebingen(dir, filter)?)
        }
        (None, None, Some(spec)) => {
            spec.validate().map_err(config_err)?;
            if estimator == EstimatorKind::Analytic && !spec.family.is_gaussian() {
                return Err(Failure::Config("analytic scores need --benchmark anm-gauss or lsnm-gauss".into()));
            }
            DataSource::Synthetic(spec)
        }
        _ => return Err(Failure::Config("give exactly one of --data, --tuebingen, --benchmark".into())),
    };
    if estimator == EstimatorKind::Analytic && !matches!(source, DataSource::Synthetic(_)) {
        return Err(Failure::Config("analytic scores need a generated Gaussian benchmark".into()));
    }
    make_dir(out)?;
    let config = BenchmarkConfig {
        family: fit.family.into(),
        estimator,
        discover,
        seed: fit.seed,
        workers: workers.max(1),
        weighted,
    };
    let report = harness::run_benchmark(&source, &config)?;
    report.write(out)?;
    println!(
        "accuracy {:.4} (weighted {:.4}), AUDRC {:.4}, {} scored, {} failed",
        report.accuracy, report.weighted_accuracy, report.audrc, report.n_scored, report.n_errors
    );
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("dataset {} failed: {}", r.id, r.error.as_deref().unwrap_or(""));
    }
    if report.error_fraction > MAX_ERROR_FRACTION {
        return Err(Failure::TooManyErrors {
            errors: report.n_errors,
            total: report.n_datasets,
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn curves_cmd(input: &Path, fit: &FitArgs, model: Option<&Path>, reverse: bool, points: usize, grid: usize, out: &Path) -> Outcome {
    let config = fit.discover_config()?;
    make_dir(out)?;
    let pair = dataset::read_pair(input)?;
    let (model, direction) = match model {
        Some(path) => (
            VelocityModel::load(path)?,
            if reverse { Direction::YtoX } else { Direction::XtoY },
        ),
        None => {
            let est = fit.estimator()?;
            let (data, field) = gof::prepare_scores(&pair, &est, &config.preprocess)?;
            let result = gof::discover_prepared(&data, &field, fit.family.into(), &config, fit.seed)?;
            let family = VelocityFamily::from(fit.family);
            let theta = match result.decision {
                Direction::XtoY => result.theta_xy.clone(),
                Direction::YtoX => result.theta_yx.clone(),
            };
            let model = VelocityModel::new(family, config.gof.arch_for(family), theta)?;
            let (_, scale) = dataset::standardize(&pair)?;
            let curves = harness::counterfactual_curves(&model, &data, result.decision, points, grid, &IntegratorConfig::default())?;
            // back to the original units
            let raw: Vec<_> = curves
                .into_iter()
                .map(|mut p| {
                    p.x = scale.mean_x + scale.sd_x * p.x;
                    p.y = scale.mean_y + scale.sd_y * p.y;
                    p
                })
                .collect();
            harness::write_curves(&raw, out.join("curves.csv"))?;
            println!("decision {}; wrote {} curve points", result.decision, raw.len());
            return Ok(());
        }
    };
    let curves = harness::counterfactual_curves(&model, &pair, direction, points, grid, &IntegratorConfig::default())?;
    harness::write_curves(&curves, out.join("curves.csv"))?;
    println!("wrote {} curve points", curves.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn score_eval_cmd(benchmark: GaussFamily, n: &[usize], datasets: usize, estimators: &[EstimatorArg], seed: u64, workers: usize, out: &Path) -> Outcome {
    let family = match benchmark {
        GaussFamily::AnmGauss => BenchmarkFamily::AnmGauss,
        GaussFamily::LsnmGauss => BenchmarkFamily::LsnmGauss,
    };
    if n.iter().any(|&k| k < 2) || datasets == 0 {
        return Err(Failure::Config("need --n ≥ 2 and --datasets ≥ 1".into()));
    }
    make_dir(out)?;
    let config = ScoreEvalConfig {
        spec: BenchmarkSpec::new(family, datasets, n[0], seed),
        sample_sizes: n.to_vec(),
        estimators: estimators.iter().map(|&e| e.into()).collect(),
        analytic: AnalyticConfig {
            seed,
            ..AnalyticConfig::default()
        },
        workers: workers.max(1),
    };
    let rows = harness::score_eval(&config)?;
    harness::write_score_eval(&rows, out.join("scores.csv"))?;
    for r in &rows {
        println!(
            "n={} {:?}: cause {:.3} ({:.3}, {:.3}), effect {:.3} ({:.3}, {:.3})",
            r.n, r.estimator, r.cause_marg.median, r.cause_marg.q1, r.cause_marg.q3, r.effect_marg.median, r.effect_marg.q1, r.effect_marg.q3
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Discover { input, fit, out } => discover_cmd(&input, &fit, &out),
        Command::Benchmark { action } => match action {
            BenchmarkAction::Generate { synth, seed, out } => generate_cmd(&synth, seed, &out),
            BenchmarkAction::Run {
                data,
                tuebingen,
                continuous_only,
                synth,
                fit,
                workers,
                weighted: _,
                unweighted,
                out,
            } => run_cmd(data.as_deref(), tuebingen.as_deref(), continuous_only, &synth, &fit, workers, !unweighted, &out),
        },
        Command::Curves {
            input,
            fit,
            model,
            reverse,
            points,
            grid,
            out,
        } => curves_cmd(&input, &fit, model.as_deref(), reverse, points, grid, &out),
        Command::ScoreEval {
            benchmark,
            n,
            datasets,
            estimator,
            seed,
            workers,
            out,
        } => score_eval_cmd(benchmark, &n, datasets, &estimator, seed, workers, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("configuration error: {m}"),
                Failure::Data(e) => eprintln!("error: {e}"),
                Failure::TooManyErrors { errors, total } => {
                    eprintln!("{errors} of {total} datasets failed (more than 10%)")
                }
            }
            ExitCode::from(f.code())
        }
    }
}
