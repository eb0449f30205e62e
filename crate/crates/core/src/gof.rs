//! Goodness-of-fit of a velocity to estimated scores, its minimization, and
//! the two-direction decision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{self, DataPair, Direction, PreprocessConfig};
use crate::error::{Error, Result};
use crate::mlp::MlpArch;
use crate::scores::{self, AnalyticConfig, KernelConfig, MechanismOracle, ScoreField, ScorePair, ScoreSource};
use crate::velocity::{VelocityFamily, VelocityModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Squared,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofConfig {
    pub max_iters: usize,
    /// Basis families use `base_lr / ln(#params)`.
    pub base_lr: f64,
    pub mlp_lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub penalty_weight: f64,
    pub penalty_order: u32,
    /// Stop when the loss improved by less than this relative amount over
    /// the last `plateau_window` iterations.
    pub tol: f64,
    pub plateau_window: usize,
    pub loss_mode: LossMode,
    /// Decisions whose confidence falls below this are flagged.
    pub low_confidence_threshold: f64,
    /// Hidden widths for MLP families; `None` uses the family default.
    pub hidden: Option<Vec<usize>>,
}

impl Default for GofConfig {
    fn default() -> Self {
        GofConfig {
            max_iters: 2000,
            base_lr: 0.1,
            mlp_lr: 0.01,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            penalty_weight: 1e-3,
            penalty_order: 2,
            tol: 1e-9,
            plateau_window: 100,
            loss_mode: LossMode::Squared,
            low_confidence_threshold: 1e-3,
            hidden: None,
        }
    }
}

impl GofConfig {
    pub fn validate(&self) -> Result<()> {
        if self.penalty_order != 2 {
            return Err(Error::UnsupportedOrder(self.penalty_order));
        }
        let (b1, b2) = self.adam_betas;
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.base_lr > 0.0 && self.mlp_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.penalty_weight >= 0.0 && self.tol >= 0.0 && self.low_confidence_threshold >= 0.0) {
            return bad("penalty weight, tolerance and confidence threshold must be nonnegative");
        }
        Ok(())
    }

    pub fn arch_for(&self, family: VelocityFamily) -> Option<MlpArch> {
        let inputs = if family == VelocityFamily::VNn { 2 } else { 1 };
        match &self.hidden {
            Some(h) if !family.is_basis() => Some(MlpArch::new(inputs, h.clone())),
            _ => family.default_arch(),
        }
    }

    pub fn learning_rate(&self, family: VelocityFamily, n_params: usize) -> f64 {
        if family.is_basis() {
            self.base_lr / (n_params as f64).ln()
        } else {
            self.mlp_lr
        }
    }
}

/// Plain Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Adam {
            lr,
            b1: betas.0,
            b2: betas.1,
            eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

fn residual_from(score: &ScoreField, i: usize, v: f64, vy: f64) -> f64 {
    score.sx_marg[i] - vy - (score.sx_joint[i] + v * score.sy_joint[i])
}

/// Violation of the continuity identity at point `i`.
pub fn residual(model: &VelocityModel, pair: &DataPair, score: &ScoreField, i: usize) -> Result<f64> {
    if i >= pair.len() || i >= score.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: pair.len().min(score.len()),
        });
    }
    let (v, vy) = model.eval(pair.ys[i], pair.xs[i]);
    Ok(residual_from(score, i, v, vy))
}

/// Residuals at every point.
pub fn residuals(model: &VelocityModel, pair: &DataPair, score: &ScoreField) -> Result<Vec<f64>> {
    score.validate(pair.len())?;
    let t = model.forward(&pair.ys, &pair.xs, false);
    Ok((0..pair.len()).map(|i| residual_from(score, i, t.v[i], t.dvdy[i])).collect())
}

/// Mean squared second derivative `d²y/dx² = ∂x v + v ∂y v` along the
/// causal curves through the data.
pub fn penalty(model: &VelocityModel, xs: &[f64], ys: &[f64], order: u32) -> Result<f64> {
    if order != 2 {
        return Err(Error::UnsupportedOrder(order));
    }
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidInput("penalty needs equal, nonempty coordinate vectors".into()));
    }
    let t = model.forward(ys, xs, true);
    let vx = t.dvdx.as_ref().expect("requested");
    let s: f64 = (0..xs.len()).map(|i| (vx[i] + t.v[i] * t.dvdy[i]).powi(2)).sum();
    Ok(s / xs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loss: f64,
    pub penalty: f64,
}

struct Objective<'a> {
    xs: Vec<f64>,
    ys: Vec<f64>,
    sxm: Vec<f64>,
    sxj: Vec<f64>,
    syj: Vec<f64>,
    config: &'a GofConfig,
}

struct Evaluation {
    loss: f64,
    penalty: f64,
    grad: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(pair: &DataPair, score: &ScoreField, mask: Option<&[bool]>, config: &'a GofConfig) -> Result<Self> {
        score.validate(pair.len())?;
        let keep = |i: usize| mask.is_none_or(|m| m[i]);
        let pick = |v: &[f64]| (0..pair.len()).filter(|&i| keep(i)).map(|i| v[i]).collect::<Vec<_>>();
        let obj = Objective {
            xs: pick(&pair.xs),
            ys: pick(&pair.ys),
            sxm: pick(&score.sx_marg),
            sxj: pick(&score.sx_joint),
            syj: pick(&score.sy_joint),
            config,
        };
        if obj.xs.is_empty() {
            return Err(Error::EmptyResult);
        }
        Ok(obj)
    }

    fn evaluate(&self, model: &VelocityModel, with_grad: bool) -> Evaluation {
        let n = self.xs.len();
        let nf = n as f64;
        let use_penalty = self.config.penalty_weight > 0.0;
        let t = model.forward(&self.ys, &self.xs, use_penalty);
        let mut loss = 0.0;
        let mut pen = 0.0;
        let mut adj_v = vec![0.0; n];
        let mut adj_vy = vec![0.0; n];
        let mut adj_vx = if use_penalty { vec![0.0; n] } else { Vec::new() };
        for i in 0..n {
            let r = self.sxm[i] - t.dvdy[i] - (self.sxj[i] + t.v[i] * self.syj[i]);
            let dr = match self.config.loss_mode {
                LossMode::Squared => {
                    loss += r * r;
                    2.0 * r / nf
                }
                LossMode::Absolute => {
                    loss += r.abs();
                    r.signum() / nf
                }
            };
            adj_v[i] = -dr * self.syj[i];
            adj_vy[i] = -dr;
            if use_penalty {
                let vx = t.dvdx.as_ref().expect("requested")[i];
                let q = vx + t.v[i] * t.dvdy[i];
                pen += q * q;
                let dq = self.config.penalty_weight * 2.0 * q / nf;
                adj_vx[i] = dq;
                adj_v[i] += dq * t.dvdy[i];
                adj_vy[i] += dq * t.v[i];
            }
        }
        let grad = if with_grad {
            model.backward(&t, &adj_v, &adj_vy, &adj_vx)
        } else {
            Vec::new()
        };
        Evaluation {
            loss: loss / nf,
            penalty: pen / nf,
            grad,
        }
    }
}

/// Loss (without penalty) of a fixed model on `pair`.
pub fn loss(model: &VelocityModel, pair: &DataPair, score: &ScoreField, mode: LossMode) -> Result<f64> {
    let cfg = GofConfig {
        penalty_weight: 0.0,
        loss_mode: mode,
        ..GofConfig::default()
    };
    Ok(Objective::new(pair, score, None, &cfg)?.evaluate(model, false).loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionFit {
    pub model: VelocityModel,
    /// Unpenalized loss of the returned parameters.
    pub loss: f64,
    pub trace: Vec<TraceEntry>,
}

/// Minimizes the loss (plus the weighted penalty) over the family with
/// full-batch Adam. Points with `mask[i] == false` are left out.
pub fn fit_direction_masked(
    pair: &DataPair,
    score: &ScoreField,
    mask: Option<&[bool]>,
    family: VelocityFamily,
    config: &GofConfig,
    seed: u64,
) -> Result<DirectionFit> {
    config.validate()?;
    let obj = Objective::new(pair, score, mask, config)?;
    let mut model = VelocityModel::init(family, config.arch_for(family), seed)?;
    let lr = config.learning_rate(family, model.param_count());
    let mut adam = Adam::new(model.param_count(), lr, config.adam_betas, config.adam_eps);
    let mut trace = Vec::with_capacity(config.max_iters + 1);
    let mut objective_hist = Vec::with_capacity(config.max_iters + 1);
    for it in 0..config.max_iters {
        let e = obj.evaluate(&model, true);
        let total = e.loss + config.penalty_weight * e.penalty;
        if !total.is_finite() || e.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        trace.push(TraceEntry {
            iteration: it,
            loss: e.loss,
            penalty: e.penalty,
        });
        objective_hist.push(total);
        let w = config.plateau_window;
        if w > 0 && it >= w {
            let before = objective_hist[it - w];
            if before - total <= config.tol * before.abs() {
                break;
            }
        }
        adam.step(&mut model.theta, &e.grad);
    }
    let last = obj.evaluate(&model, false);
    if !last.loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: trace.len() });
    }
    trace.push(TraceEntry {
        iteration: trace.len(),
        loss: last.loss,
        penalty: last.penalty,
    });
    Ok(DirectionFit {
        model,
        loss: last.loss,
        trace,
    })
}

/// Returns the fitted parameters and the final unpenalized loss.
pub fn fit_direction(
    pair: &DataPair,
    score: &ScoreField,
    family: VelocityFamily,
    config: &GofConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let fit = fit_direction_masked(pair, score, None, family, config, seed)?;
    Ok((fit.model.theta, fit.loss))
}

/// Where the scores come from.
#[derive(Clone, Copy)]
pub enum Estimator<'a> {
    Stein(KernelConfig),
    Kde(KernelConfig),
    Analytic {
        oracle: &'a dyn MechanismOracle,
        config: AnalyticConfig,
    },
}

impl Estimator<'_> {
    pub fn source(&self) -> ScoreSource {
        match self {
            Estimator::Stein(_) => ScoreSource::Stein,
            Estimator::Kde(_) => ScoreSource::Kde,
            Estimator::Analytic { .. } => ScoreSource::Analytic,
        }
    }

    pub fn stein() -> Self {
        Estimator::Stein(KernelConfig::stein())
    }

    pub fn kde() -> Self {
        Estimator::Kde(KernelConfig::kde())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub id: String,
    pub family: VelocityFamily,
    pub estimator: ScoreSource,
    pub n: usize,
    pub loss_xy: f64,
    pub loss_yx: f64,
    pub theta_xy: Vec<f64>,
    pub theta_yx: Vec<f64>,
    pub decision: Direction,
    pub confidence: f64,
    pub tie: bool,
    pub low_confidence: bool,
    pub trace_xy: Vec<TraceEntry>,
    pub trace_yx: Vec<TraceEntry>,
}

impl FitResult {
    pub fn from_fits(id: &str, estimator: ScoreSource, n: usize, xy: DirectionFit, yx: DirectionFit, config: &GofConfig) -> Self {
        let tie = xy.loss == yx.loss;
        let decision = if xy.loss <= yx.loss { Direction::XtoY } else { Direction::YtoX };
        let confidence = (xy.loss - yx.loss).abs();
        FitResult {
            id: id.to_string(),
            family: xy.model.family,
            estimator,
            n,
            loss_xy: xy.loss,
            loss_yx: yx.loss,
            theta_xy: xy.model.theta,
            theta_yx: yx.model.theta,
            decision,
            confidence,
            tie,
            low_confidence: confidence < config.low_confidence_threshold,
            trace_xy: xy.trace,
            trace_yx: yx.trace,
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_json(self, path)
    }

    /// Writes `direction,iteration,loss,penalty`.
    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(ser)?;
        w.write_record(["direction", "iteration", "loss", "penalty"]).map_err(ser)?;
        for (dir, trace) in [(Direction::XtoY, &self.trace_xy), (Direction::YtoX, &self.trace_yx)] {
            for t in trace {
                let f = crate::io::fmt_f64;
                w.write_record([dir.to_string(), t.iteration.to_string(), f(t.loss), f(t.penalty)])
                    .map_err(ser)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Preprocessing and fitting settings for [`discover`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscoverConfig {
    pub preprocess: PreprocessConfig,
    pub gof: GofConfig,
}

/// Score fields for both directions on the preprocessed data, following
/// the pipeline order: subsample, standardize, estimate.
pub fn prepare_scores(pair: &DataPair, estimator: &Estimator, pre: &PreprocessConfig) -> Result<(DataPair, ScorePair)> {
    pre.validate()?;
    pair.validate()?;
    let sampled = match pre.subsample_to {
        Some(m) => dataset::subsample(pair, m, pre.rng_seed)?,
        None => pair.clone(),
    };
    let (data, scale) = if pre.standardize {
        let (d, s) = dataset::standardize(&sampled)?;
        (d, Some(s))
    } else {
        (sampled.clone(), None)
    };
    let tag = |d: Direction| move |e: Error| e.tagged(d);
    let field = match estimator {
        Estimator::Stein(k) | Estimator::Kde(k) => {
            let est = if matches!(estimator, Estimator::Stein(_)) {
                scores::stein_estimate
            } else {
                scores::kde_estimate
            };
            let joint = est(&[&data.xs, &data.ys], k)?;
            let mx = est(&[&data.xs], k).map_err(tag(Direction::XtoY))?.remove(0);
            let my = est(&[&data.ys], k).map_err(tag(Direction::YtoX))?.remove(0);
            let [jx, jy]: [Vec<f64>; 2] = joint.try_into().expect("two coordinates");
            ScorePair {
                forward: ScoreField {
                    sx_marg: mx,
                    sx_joint: jx.clone(),
                    sy_joint: jy.clone(),
                    source: estimator.source(),
                },
                reverse: ScoreField {
                    sx_marg: my,
                    sx_joint: jy,
                    sy_joint: jx,
                    source: estimator.source(),
                },
            }
        }
        Estimator::Analytic { oracle, config } => {
            // closed forms live on the raw scale
            let raw = scores::analytic_score_pair(&sampled, *oracle, config)?;
            match &scale {
                Some(s) => raw.rescaled(s.sd_x, s.sd_y),
                None => raw,
            }
        }
    };
    Ok((data, field))
}

/// Fits both directions on already prepared data and scores.
pub fn discover_prepared(
    data: &DataPair,
    field: &ScorePair,
    family: VelocityFamily,
    config: &DiscoverConfig,
    seed: u64,
) -> Result<FitResult> {
    let mask = if config.preprocess.trim_fraction > 0.0 {
        Some(dataset::trim_mask(&data.xs, &data.ys, config.preprocess.trim_fraction)?)
    } else {
        None
    };
    let swapped = data.swapped();
    let (xy, yx) = rayon::join(
        || fit_direction_masked(data, &field.forward, mask.as_deref(), family, &config.gof, seed),
        || fit_direction_masked(&swapped, &field.reverse, mask.as_deref(), family, &config.gof, seed),
    );
    let xy = xy.map_err(|e| e.tagged(Direction::XtoY))?;
    let yx = yx.map_err(|e| e.tagged(Direction::YtoX))?;
    let n = mask.as_ref().map_or(data.len(), |m| m.iter().filter(|k| **k).count());
    Ok(FitResult::from_fits(&data.id, field.forward.source, n, xy, yx, &config.gof))
}

/// Estimates scores, fits the velocity in both directions and picks the
/// direction with the smaller loss.
pub fn discover(
    pair: &DataPair,
    estimator: &Estimator,
    family: VelocityFamily,
    config: &DiscoverConfig,
    seed: u64,
) -> Result<FitResult> {
    config.gof.validate()?;
    let (data, field) = prepare_scores(pair, estimator, &config.preprocess)?;
    discover_prepared(&data, &field, family, config, seed)
}
