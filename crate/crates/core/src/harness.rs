//! Benchmark runs, accuracy and AUDRC, score-quality evaluation and
//! counterfactual curve export.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DataPair, Direction};
use crate::error::{Error, Result};
use crate::flow::{self, IntegratorConfig};
use crate::gof::{self, DiscoverConfig, Estimator, FitResult};
use crate::io::fmt_f64;
use crate::scores::{self, AnalyticConfig, KernelConfig, ScoreField, ScoreSource};
use crate::synth::{self, BenchmarkSpec};
use crate::velocity::{VelocityFamily, VelocityModel};

/// One dataset's contribution to the decision-rate curve.
#[derive(Debug, Clone, PartialEq)]
pub struct AudrcRow {
    pub id: String,
    pub correct: bool,
    pub confidence: f64,
    pub weight: f64,
}

/// Area under the decision-rate curve: rank by confidence (descending, ties
/// by id), then average the weighted accuracy of every top-`k` prefix.
/// Prefixes with zero total weight have no accuracy and are skipped.
pub fn compute_audrc(rows: &[AudrcRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    if rows.iter().any(|r| !(r.weight >= 0.0) || r.confidence.is_nan()) {
        return Err(Error::InvalidInput("weights must be nonnegative and confidences not NaN".into()));
    }
    let mut order: Vec<&AudrcRow> = rows.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.id.cmp(&b.id)));
    let (mut hit, mut total, mut acc_sum, mut counted) = (0.0, 0.0, 0.0, 0usize);
    for r in order {
        total += r.weight;
        if r.correct {
            hit += r.weight;
        }
        if total > 0.0 {
            acc_sum += hit / total;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidInput("all weights are zero".into()));
    }
    Ok(acc_sum / counted as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Stein,
    Kde,
    Analytic,
}

impl From<EstimatorKind> for ScoreSource {
    fn from(k: EstimatorKind) -> Self {
        match k {
            EstimatorKind::Stein => ScoreSource::Stein,
            EstimatorKind::Kde => ScoreSource::Kde,
            EstimatorKind::Analytic => ScoreSource::Analytic,
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.parse::<ScoreSource>()? {
            ScoreSource::Stein => EstimatorKind::Stein,
            ScoreSource::Kde => EstimatorKind::Kde,
            ScoreSource::Analytic => EstimatorKind::Analytic,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub family: VelocityFamily,
    pub estimator: EstimatorKind,
    pub discover: DiscoverConfig,
    /// Base seed for parameter initialization; dataset `i` uses `seed + i`.
    pub seed: u64,
    pub workers: usize,
    pub weighted: bool,
}

impl BenchmarkConfig {
    pub fn new(family: VelocityFamily, estimator: EstimatorKind) -> Self {
        BenchmarkConfig {
            family,
            estimator,
            discover: DiscoverConfig::default(),
            seed: 0,
            workers: 1,
            weighted: true,
        }
    }
}

/// Datasets to run on.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Generated on the fly; required for analytic scores.
    Synthetic(BenchmarkSpec),
    Pairs(Vec<DataPair>),
}

impl DataSource {
    pub fn len(&self) -> usize {
        match self {
            DataSource::Synthetic(s) => s.n_datasets,
            DataSource::Pairs(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub id: String,
    pub decision: Option<Direction>,
    pub truth: Option<Direction>,
    pub correct: Option<bool>,
    pub confidence: f64,
    pub loss_xy: f64,
    pub loss_yx: f64,
    pub weight: f64,
    pub tie: bool,
    pub low_confidence: bool,
    pub error: Option<String>,
}

impl ResultRow {
    fn from_fit(fit: &FitResult, pair: &DataPair) -> Self {
        ResultRow {
            id: pair.id.clone(),
            decision: Some(fit.decision),
            truth: pair.truth,
            correct: pair.truth.map(|t| t == fit.decision),
            confidence: fit.confidence,
            loss_xy: fit.loss_xy,
            loss_yx: fit.loss_yx,
            weight: pair.weight,
            tie: fit.tie,
            low_confidence: fit.low_confidence,
            error: None,
        }
    }

    fn failed(id: String, weight: f64, truth: Option<Direction>, err: &Error) -> Self {
        ResultRow {
            id,
            decision: None,
            truth,
            correct: None,
            confidence: f64::NAN,
            loss_xy: f64::NAN,
            loss_yx: f64::NAN,
            weight,
            tie: false,
            low_confidence: false,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub family: VelocityFamily,
    pub estimator: EstimatorKind,
    pub weighted: bool,
    pub accuracy: f64,
    pub weighted_accuracy: f64,
    /// AUDRC with pair weights when `weighted`, unit weights otherwise.
    pub audrc: f64,
    pub n_datasets: usize,
    pub n_scored: usize,
    pub n_errors: usize,
    pub error_fraction: f64,
    pub rows: Vec<ResultRow>,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<ResultRow>, family: VelocityFamily, estimator: EstimatorKind, weighted: bool) -> Result<Self> {
        let scored: Vec<&ResultRow> = rows.iter().filter(|r| r.correct.is_some()).collect();
        let n_errors = rows.iter().filter(|r| r.error.is_some()).count();
        let n = rows.len();
        let (accuracy, weighted_accuracy, audrc) = if scored.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let hits = scored.iter().filter(|r| r.correct == Some(true)).count();
            let w_total: f64 = scored.iter().map(|r| r.weight).sum();
            let w_hits: f64 = scored.iter().filter(|r| r.correct == Some(true)).map(|r| r.weight).sum();
            let audrc_rows: Vec<AudrcRow> = scored
                .iter()
                .map(|r| AudrcRow {
                    id: r.id.clone(),
                    correct: r.correct == Some(true),
                    confidence: r.confidence,
                    weight: if weighted { r.weight } else { 1.0 },
                })
                .collect();
            (
                hits as f64 / scored.len() as f64,
                if w_total > 0.0 { w_hits / w_total } else { f64::NAN },
                compute_audrc(&audrc_rows)?,
            )
        };
        Ok(MetricsReport {
            family,
            estimator,
            weighted,
            accuracy,
            weighted_accuracy,
            audrc,
            n_datasets: n,
            n_scored: scored.len(),
            n_errors,
            error_fraction: if n == 0 { 0.0 } else { n_errors as f64 / n as f64 },
            rows,
        })
    }

    /// The accuracy the run is configured to headline.
    pub fn headline_accuracy(&self) -> f64 {
        if self.weighted {
            self.weighted_accuracy
        } else {
            self.accuracy
        }
    }

    /// Writes `report.json` and `results.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::io::write_json(self, dir.join("report.json"))?;
        let path = dir.join("results.csv");
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        let mut w = csv::Writer::from_path(&path).map_err(ser)?;
        w.write_record([
            "id", "decision", "truth", "correct", "confidence", "loss_xy", "loss_yx", "weight", "tie", "low_confidence", "error",
        ])
        .map_err(ser)?;
        let opt = |d: Option<Direction>| d.map(|d| d.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                opt(r.decision),
                opt(r.truth),
                r.correct.map(|c| c.to_string()).unwrap_or_default(),
                fmt_f64(r.confidence),
                fmt_f64(r.loss_xy),
                fmt_f64(r.loss_yx),
                fmt_f64(r.weight),
                r.tie.to_string(),
                r.low_confidence.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(ser)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))
}

fn run_one(source: &DataSource, index: usize, config: &BenchmarkConfig) -> ResultRow {
    let seed = config.seed.wrapping_add(index as u64);
    let kernel = |k: EstimatorKind| match k {
        EstimatorKind::Kde => Estimator::Kde(KernelConfig::kde()),
        _ => Estimator::Stein(KernelConfig::stein()),
    };
    let outcome = match (source, config.estimator) {
        (DataSource::Synthetic(spec), EstimatorKind::Analytic) => synth::generate_gaussian_oracle(spec, index).and_then(|(pair, oracle)| {
            let est = Estimator::Analytic {
                oracle: &oracle,
                config: AnalyticConfig {
                    seed,
                    ..AnalyticConfig::default()
                },
            };
            gof::discover(&pair, &est, config.family, &config.discover, seed).map(|fit| ResultRow::from_fit(&fit, &pair))
        }),
        (DataSource::Synthetic(spec), k) => synth::generate_dataset(spec, index)
            .and_then(|pair| gof::discover(&pair, &kernel(k), config.family, &config.discover, seed).map(|fit| ResultRow::from_fit(&fit, &pair))),
        (DataSource::Pairs(_), EstimatorKind::Analytic) => Err(Error::InvalidInput(
            "analytic scores need generated Gaussian-noise data".into(),
        )),
        (DataSource::Pairs(pairs), k) => {
            let pair = &pairs[index];
            gof::discover(pair, &kernel(k), config.family, &config.discover, seed).map(|fit| ResultRow::from_fit(&fit, pair))
        }
    };
    outcome.unwrap_or_else(|e| {
        let (id, weight, truth) = match source {
            DataSource::Synthetic(spec) => (spec.dataset_id(index), 1.0, Some(Direction::XtoY)),
            DataSource::Pairs(p) => (p[index].id.clone(), p[index].weight, p[index].truth),
        };
        ResultRow::failed(id, weight, truth, &e)
    })
}

/// Runs discovery on every dataset. Failures become error rows that are
/// excluded from the metrics. The report depends only on the data and the
/// configuration, not on the worker count.
pub fn run_benchmark(source: &DataSource, config: &BenchmarkConfig) -> Result<MetricsReport> {
    config.discover.gof.validate()?;
    config.discover.preprocess.validate()?;
    if let DataSource::Synthetic(spec) = source {
        spec.validate()?;
    }
    if source.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rows: Vec<ResultRow> = pool(config.workers)?.install(|| {
        (0..source.len())
            .into_par_iter()
            .map(|i| run_one(source, i, config))
            .collect()
    });
    MetricsReport::from_rows(rows, config.family, config.estimator, config.weighted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEvalConfig {
    pub spec: BenchmarkSpec,
    pub sample_sizes: Vec<usize>,
    pub estimators: Vec<EstimatorKind>,
    pub analytic: AnalyticConfig,
    pub workers: usize,
}

/// Per-dataset mean squared errors against the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreErrors {
    pub cause_marg: f64,
    pub joint_x: f64,
    pub joint_y: f64,
    pub effect_marg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Quartiles {
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEvalRow {
    pub n: usize,
    pub estimator: EstimatorKind,
    pub datasets: usize,
    pub cause_marg: Quartiles,
    pub joint_x: Quartiles,
    pub joint_y: Quartiles,
    pub effect_marg: Quartiles,
    pub per_dataset: Vec<ScoreErrors>,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Scores of `kind` for the `X → Y` direction, on the raw data scale.
fn raw_scale_scores(pair: &DataPair, kind: EstimatorKind, oracle_fields: &(ScoreField, Vec<f64>)) -> Result<(ScoreField, Vec<f64>)> {
    if kind == EstimatorKind::Analytic {
        return Ok(oracle_fields.clone());
    }
    let (std_pair, s) = dataset::standardize(pair)?;
    let est = match kind {
        EstimatorKind::Kde => Estimator::Kde(KernelConfig::kde()),
        _ => Estimator::Stein(KernelConfig::stein()),
    };
    let plain = dataset::PreprocessConfig {
        standardize: false,
        ..Default::default()
    };
    let (_, field) = gof::prepare_scores(&std_pair, &est, &plain)?;
    let back = field.rescaled(1.0 / s.sd_x, 1.0 / s.sd_y);
    Ok((back.forward, back.reverse.sx_marg))
}

/// Mean squared error of each estimated score component against the
/// closed-form oracle, summarized by median and quartiles over datasets.
pub fn score_eval(config: &ScoreEvalConfig) -> Result<Vec<ScoreEvalRow>> {
    if !config.spec.family.is_gaussian() {
        return Err(Error::InvalidInput("score evaluation needs ANM-Gauss or LSNM-Gauss".into()));
    }
    if config.spec.n_datasets == 0 || config.sample_sizes.is_empty() || config.estimators.is_empty() {
        return Err(Error::EmptyInput);
    }
    let pool = pool(config.workers)?;
    let mut out = Vec::new();
    for &n in &config.sample_sizes {
        let spec = BenchmarkSpec { n, ..config.spec.clone() };
        let per: Vec<Vec<ScoreErrors>> = pool.install(|| {
            (0..spec.n_datasets)
                .into_par_iter()
                .map(|i| {
                    let (pair, oracle) = synth::generate_gaussian_oracle(&spec, i)?;
                    let fwd = scores::analytic_gaussian_scores(&pair, &oracle)?;
                    let analytic = AnalyticConfig {
                        seed: config.analytic.seed.wrapping_add(i as u64),
                        ..config.analytic
                    };
                    let eff = scores::analytic_effect_marginal(&pair.ys, &oracle, &analytic)?;
                    let truth = (fwd, eff);
                    config
                        .estimators
                        .iter()
                        .map(|&k| {
                            let (f, e) = raw_scale_scores(&pair, k, &truth)?;
                            Ok(ScoreErrors {
                                cause_marg: mse(&f.sx_marg, &truth.0.sx_marg),
                                joint_x: mse(&f.sx_joint, &truth.0.sx_joint),
                                joint_y: mse(&f.sy_joint, &truth.0.sy_joint),
                                effect_marg: mse(&e, &truth.1),
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (k, &kind) in config.estimators.iter().enumerate() {
            let col: Vec<ScoreErrors> = per.iter().map(|d| d[k]).collect();
            let pick = |f: fn(&ScoreErrors) -> f64| Quartiles::of(&col.iter().map(f).collect::<Vec<_>>());
            out.push(ScoreEvalRow {
                n,
                estimator: kind,
                datasets: col.len(),
                cause_marg: pick(|e| e.cause_marg),
                joint_x: pick(|e| e.joint_x),
                joint_y: pick(|e| e.joint_y),
                effect_marg: pick(|e| e.effect_marg),
                per_dataset: col,
            });
        }
    }
    Ok(out)
}

/// Writes the score evaluation summary: medians under the component names,
/// quartiles in `_q1`/`_q3` columns.
pub fn write_score_eval(rows: &[ScoreEvalRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(ser)?;
    let mut header = vec!["n".to_string(), "estimator".to_string(), "datasets".to_string()];
    for c in ["mse_cause_marg", "mse_joint_x", "mse_joint_y", "mse_effect_marg"] {
        header.extend([c.to_string(), format!("{c}_q1"), format!("{c}_q3")]);
    }
    w.write_record(&header).map_err(ser)?;
    for r in rows {
        let mut rec = vec![r.n.to_string(), ScoreSource::from(r.estimator).to_string().to_lowercase(), r.datasets.to_string()];
        for q in [r.cause_marg, r.joint_x, r.joint_y, r.effect_marg] {
            rec.extend([fmt_f64(q.median), fmt_f64(q.q1), fmt_f64(q.q3)]);
        }
        w.write_record(&rec).map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub curve_id: usize,
    pub x: f64,
    pub y: f64,
}

/// Causal curves of `model` through the first `count` points of `pair`
/// over `grid_points` evenly spaced cause values spanning the data. For a
/// `YtoX` model the cause is `y`, and points are reported in the original
/// `(x, y)` orientation.
pub fn counterfactual_curves(
    model: &VelocityModel,
    pair: &DataPair,
    direction: Direction,
    count: usize,
    grid_points: usize,
    integrator: &IntegratorConfig,
) -> Result<Vec<CurvePoint>> {
    if grid_points < 2 {
        return Err(Error::InvalidInput("a curve needs at least 2 grid points".into()));
    }
    let (cause, effect) = match direction {
        Direction::XtoY => (&pair.xs, &pair.ys),
        Direction::YtoX => (&pair.ys, &pair.xs),
    };
    let lo = cause.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cause.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid: Vec<f64> = (0..grid_points).map(|k| lo + (hi - lo) * k as f64 / (grid_points - 1) as f64).collect();
    let v = model.as_fn();
    let mut out = Vec::new();
    for i in 0..count.min(pair.len()) {
        // integrate from the observation to the grid start, then along it
        let start = flow::integrate_flow(&v, effect[i], cause[i], grid[0], integrator)?;
        for (u, y) in flow::causal_curve(&v, start, grid[0], &grid, integrator)? {
            let (x, y) = match direction {
                Direction::XtoY => (u, y),
                Direction::YtoX => (y, u),
            };
            out.push(CurvePoint { curve_id: i, x, y });
        }
    }
    Ok(out)
}

pub fn write_curves(points: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(ser)?;
    w.write_record(["curve_id", "x", "y"]).map_err(ser)?;
    for p in points {
        w.write_record([p.curve_id.to_string(), fmt_f64(p.x), fmt_f64(p.y)]).map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, correct: bool, confidence: f64) -> AudrcRow {
        AudrcRow {
            id: id.into(),
            correct,
            confidence,
            weight: 1.0,
        }
    }

    #[test]
    fn audrc_examples() {
        assert_eq!(compute_audrc(&[row("a", true, 0.3), row("b", true, 0.1)]).unwrap(), 1.0);
        assert_eq!(compute_audrc(&[row("a", true, 0.9), row("b", false, 0.1)]).unwrap(), 0.75);
        assert_eq!(compute_audrc(&[row("a", false, 0.9), row("b", true, 0.1)]).unwrap(), 0.25);
        assert!(matches!(compute_audrc(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn audrc_ties_follow_id() {
        let rows = [row("b", true, 1.0), row("a", false, 1.0), row("c", true, 1.0)];
        // order a, b, c: prefix accuracies 0, 1/2, 2/3
        let want = (0.0 + 0.5 + 2.0 / 3.0) / 3.0;
        assert!((compute_audrc(&rows).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn audrc_weights() {
        let mut rows = [row("a", false, 0.9), row("b", true, 0.1)];
        rows[1].weight = 3.0;
        // prefixes: 0/1, 3/4
        assert_eq!(compute_audrc(&rows).unwrap(), 0.375);
    }

    #[test]
    fn quartiles_interpolate() {
        let q = Quartiles::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((q.median, q.q1, q.q3), (3.0, 2.0, 4.0));
    }

    #[test]
    fn failures_are_excluded_and_counted() {
        let rows = vec![
            ResultRow::from_fit(
                &FitResult {
                    id: "a".into(),
                    family: VelocityFamily::BLin,
                    estimator: ScoreSource::Stein,
                    n: 2,
                    loss_xy: 0.1,
                    loss_yx: 0.3,
                    theta_xy: vec![],
                    theta_yx: vec![],
                    decision: Direction::XtoY,
                    confidence: 0.2,
                    tie: false,
                    low_confidence: false,
                    trace_xy: vec![],
                    trace_yx: vec![],
                },
                &DataPair::new("a", vec![0.0, 1.0], vec![1.0, 0.0]).unwrap().with_truth(Direction::XtoY),
            ),
            ResultRow::failed("b".into(), 1.0, Some(Direction::XtoY), &Error::EmptyResult),
        ];
        let r = MetricsReport::from_rows(rows, VelocityFamily::BLin, EstimatorKind::Stein, false).unwrap();
        assert_eq!((r.n_scored, r.n_errors, r.accuracy, r.audrc), (1, 1, 1.0, 1.0));
        assert_eq!(r.error_fraction, 0.5);
    }
}
