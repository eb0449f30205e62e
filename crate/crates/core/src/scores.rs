//! Score estimation at the sample points.
//!
//! Three sources are available: the Stein gradient estimator (Gaussian
//! kernel, median-heuristic bandwidth), the log-gradient of a Laplace-kernel
//! density estimate, and closed-form scores for Gaussian-noise location-scale
//! mechanisms.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::DataPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScoreSource {
    Stein,
    Kde,
    Analytic,
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreSource::Stein => "STEIN",
            ScoreSource::Kde => "KDE",
            ScoreSource::Analytic => "ANALYTIC",
        })
    }
}

impl FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stein" => Ok(ScoreSource::Stein),
            "kde" => Ok(ScoreSource::Kde),
            "analytic" => Ok(ScoreSource::Analytic),
            _ => Err(Error::InvalidInput(format!("unknown score estimator {s:?}"))),
        }
    }
}

/// Scores for one causal direction, evaluated at the sample points: the
/// cause marginal `s_x(x_i)` and both partials of the joint log-density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreField {
    pub sx_marg: Vec<f64>,
    pub sx_joint: Vec<f64>,
    pub sy_joint: Vec<f64>,
    pub source: ScoreSource,
}

impl ScoreField {
    pub fn len(&self) -> usize {
        self.sx_marg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sx_marg.is_empty()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.sx_marg.len() != n || self.sx_joint.len() != n || self.sy_joint.len() != n {
            return Err(Error::InvalidInput(format!(
                "score field has lengths ({}, {}, {}) but the dataset has {n} points",
                self.sx_marg.len(),
                self.sx_joint.len(),
                self.sy_joint.len()
            )));
        }
        let all = self.sx_marg.iter().chain(&self.sx_joint).chain(&self.sy_joint);
        if let Some(bad) = all.clone().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite score value at flat index {bad}"
            )));
        }
        Ok(())
    }

    /// Scores of the affinely rescaled variables `x' = (x − a)/sd_x`,
    /// `y' = (y − b)/sd_y`: each partial picks up its coordinate's scale.
    pub fn rescaled(&self, sd_x: f64, sd_y: f64) -> ScoreField {
        ScoreField {
            sx_marg: self.sx_marg.iter().map(|v| v * sd_x).collect(),
            sx_joint: self.sx_joint.iter().map(|v| v * sd_x).collect(),
            sy_joint: self.sy_joint.iter().map(|v| v * sd_y).collect(),
            source: self.source,
        }
    }

    /// Writes `x,y,sx_marg,sx_joint,sy_joint,source`.
    pub fn write_csv(&self, pair: &DataPair, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate(pair.len())?;
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(ser)?;
        w.write_record(["x", "y", "sx_marg", "sx_joint", "sy_joint", "source"])
            .map_err(ser)?;
        let tag = self.source.to_string();
        for i in 0..pair.len() {
            let f = crate::io::fmt_f64;
            w.write_record([
                f(pair.xs[i]),
                f(pair.ys[i]),
                f(self.sx_marg[i]),
                f(self.sx_joint[i]),
                f(self.sy_joint[i]),
                tag.clone(),
            ])
            .map_err(ser)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the CSV written by [`ScoreField::write_csv`], returning the
    /// points alongside the field.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<f64>, ScoreField)> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
        let mut cols: [Vec<f64>; 5] = Default::default();
        let mut source = None;
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Serialization(e.to_string()))?;
            let bad = |message: String| Error::Parse {
                file: path.to_path_buf(),
                line: i + 2,
                message,
            };
            for (k, col) in cols.iter_mut().enumerate() {
                let v = rec
                    .get(k)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| bad(format!("bad number in column {}", k + 1)))?;
                col.push(v);
            }
            let tag: ScoreSource = rec.get(5).unwrap_or("").parse().map_err(|_| bad("bad source tag".into()))?;
            if source.is_some_and(|s| s != tag) {
                return Err(bad("mixed source tags".into()));
            }
            source = Some(tag);
        }
        let [xs, ys, a, b, c] = cols;
        let field = ScoreField {
            sx_marg: a,
            sx_joint: b,
            sy_joint: c,
            source: source.ok_or(Error::EmptyInput)?,
        };
        Ok((xs, ys, field))
    }
}

/// Score fields for both candidate directions of one dataset. `reverse`
/// is aligned with [`DataPair::swapped`]: its `sx_*` entries refer to `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub forward: ScoreField,
    pub reverse: ScoreField,
}

impl ScorePair {
    fn assemble(marg_x: Vec<f64>, marg_y: Vec<f64>, joint_x: Vec<f64>, joint_y: Vec<f64>, source: ScoreSource) -> Self {
        ScorePair {
            forward: ScoreField {
                sx_marg: marg_x,
                sx_joint: joint_x.clone(),
                sy_joint: joint_y.clone(),
                source,
            },
            reverse: ScoreField {
                sx_marg: marg_y,
                sx_joint: joint_y,
                sy_joint: joint_x,
                source,
            },
        }
    }

    pub fn rescaled(&self, sd_x: f64, sd_y: f64) -> ScorePair {
        ScorePair {
            forward: self.forward.rescaled(sd_x, sd_y),
            reverse: self.reverse.rescaled(sd_y, sd_x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelFamily {
    Gaussian,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Lengthscale {
    Fixed(f64),
    MedianHeuristic,
    Silverman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Regularization {
    Fixed(f64),
    /// `1/n²`, recomputed for each dataset.
    InverseSquareN,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub lengthscale: Lengthscale,
    pub regularization: Regularization,
}

impl KernelConfig {
    /// Gaussian kernel, median-heuristic bandwidth, ridge 0.1.
    pub fn stein() -> Self {
        KernelConfig {
            family: KernelFamily::Gaussian,
            lengthscale: Lengthscale::MedianHeuristic,
            regularization: Regularization::Fixed(0.1),
        }
    }

    /// Laplace kernel, Silverman bandwidth, smoothing `1/n²`.
    pub fn kde() -> Self {
        KernelConfig {
            family: KernelFamily::Laplace,
            lengthscale: Lengthscale::Silverman,
            regularization: Regularization::InverseSquareN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Lengthscale::Fixed(l) = self.lengthscale {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidInput(format!("lengthscale must be positive, got {l}")));
            }
        }
        if let Regularization::Fixed(r) = self.regularization {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidInput(format!("regularization must be positive, got {r}")));
            }
        }
        Ok(())
    }

    fn regularization_for(&self, n: usize) -> f64 {
        match self.regularization {
            Regularization::Fixed(r) => r,
            Regularization::InverseSquareN => 1.0 / (n as f64 * n as f64),
        }
    }
}

/// Points in `d` dimensions stored column-wise: `coords[d][i]`.
type Points<'a> = &'a [&'a [f64]];

fn sq_dist(points: Points, i: usize, j: usize) -> f64 {
    points.iter().map(|c| (c[i] - c[j]).powi(2)).sum()
}

/// Median of all pairwise Euclidean distances.
pub fn median_heuristic(points: Points) -> Result<f64> {
    let n = points.first().map_or(0, |c| c.len());
    if n < 2 {
        return Err(Error::InvalidInput("median heuristic needs at least 2 points".into()));
    }
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(points, i, j));
        }
    }
    let m = d.len();
    let (_, &mut hi, _) = d.select_nth_unstable_by(m / 2, f64::total_cmp);
    let median_sq = if m % 2 == 1 {
        hi
    } else {
        let lo = d[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo.sqrt() + hi.sqrt()) * 0.5 * (lo.sqrt() + hi.sqrt())
    };
    let median = median_sq.sqrt();
    if median <= 0.0 {
        return Err(Error::AllPointsIdentical);
    }
    Ok(median)
}

/// Stein gradient estimator in `d` dimensions; returns one score vector per
/// coordinate. Kernel `exp(−‖a−b‖²/(2σ²))`.
pub fn stein_estimate(points: Points, config: &KernelConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    if config.family != KernelFamily::Gaussian {
        return Err(Error::InvalidInput("the Stein estimator uses a Gaussian kernel".into()));
    }
    let dim = points.len();
    let n = points[0].len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 points".into()));
    }
    let sigma = match config.lengthscale {
        Lengthscale::Fixed(s) => s,
        Lengthscale::MedianHeuristic => median_heuristic(points)?,
        Lengthscale::Silverman => {
            return Err(Error::InvalidInput(
                "Silverman bandwidth is only defined for the density estimator".into(),
            ))
        }
    };
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut k = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = 1.0;
        for i in j + 1..n {
            let v = (-sq_dist(points, i, j) * inv2s2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    // rhs = −B with B[i,d] = Σ_j ∂k(z_i, z_j)/∂z_{j,d} = Σ_j K_ij (z_id − z_jd)/σ²
    let mut rhs = DMatrix::<f64>::zeros(n, dim);
    for (d, c) in points.iter().enumerate() {
        for i in 0..n {
            let mut b = 0.0;
            for j in 0..n {
                b += k[(i, j)] * (c[i] - c[j]);
            }
            rhs[(i, d)] = -b * inv_s2;
        }
    }
    let lambda = config.regularization_for(n);
    let factor = [lambda, 10.0 * lambda].into_iter().find_map(|lam| {
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += lam;
        }
        Cholesky::new(a)
    });
    let chol = factor.ok_or(Error::SingularSystem {
        regularization: 10.0 * lambda,
    })?;
    let s = chol.solve(&rhs);
    Ok((0..dim).map(|d| s.column(d).iter().copied().collect()).collect())
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `0.9 · min(sd, IQR/1.34) · n^(−1/5)`, falling back to whichever spread
/// measure is nonzero.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 points".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => return Err(Error::AllPointsIdentical),
    };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Log-gradient of a product Laplace-kernel density estimate,
/// `∇p̂ / (p̂ + ε)`, evaluated at the sample points (own kernel included).
pub fn kde_estimate(points: Points, config: &KernelConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    if config.family != KernelFamily::Laplace {
        return Err(Error::InvalidInput("the density estimator uses a Laplace kernel".into()));
    }
    let n = points[0].len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 points".into()));
    }
    let h: Vec<f64> = match config.lengthscale {
        Lengthscale::Fixed(l) => vec![l; points.len()],
        Lengthscale::Silverman => points
            .iter()
            .map(|c| silverman_bandwidth(c))
            .collect::<Result<_>>()?,
        Lengthscale::MedianHeuristic => vec![median_heuristic(points)?; points.len()],
    };
    let eps = config.regularization_for(n);
    Ok(kde_scores_at(points, &h, eps, points))
}

/// Laplace-KDE score built on `data`, evaluated at `at`.
pub fn kde_scores_at(data: Points, bandwidth: &[f64], eps: f64, at: Points) -> Vec<Vec<f64>> {
    let dim = data.len();
    let n = data[0].len();
    let m = at[0].len();
    let norm: f64 = bandwidth.iter().map(|h| 2.0 * h).product::<f64>() * n as f64;
    let mut out = vec![vec![0.0; m]; dim];
    let mut grad = vec![0.0; dim];
    for i in 0..m {
        let mut dens = 0.0;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for j in 0..n {
            let mut l1 = 0.0;
            for d in 0..dim {
                l1 += (at[d][i] - data[d][j]).abs() / bandwidth[d];
            }
            let kv = (-l1).exp();
            dens += kv;
            for d in 0..dim {
                let u = at[d][i] - data[d][j];
                // zero subgradient at the kink
                if u != 0.0 {
                    grad[d] -= kv * u.signum() / bandwidth[d];
                }
            }
        }
        let p = dens / norm;
        for d in 0..dim {
            out[d][i] = (grad[d] / norm) / (p + eps);
        }
    }
    out
}

/// Stein scores for the `X → Y` direction of `pair`.
pub fn stein_scores(pair: &DataPair, config: &KernelConfig) -> Result<ScoreField> {
    pair.validate()?;
    let joint = stein_estimate(&[&pair.xs, &pair.ys], config)?;
    let marg = stein_estimate(&[&pair.xs], config)?;
    let [sx, sy]: [Vec<f64>; 2] = joint.try_into().expect("two coordinates");
    Ok(ScoreField {
        sx_marg: marg.into_iter().next().unwrap(),
        sx_joint: sx,
        sy_joint: sy,
        source: ScoreSource::Stein,
    })
}

/// Density-estimate scores for the `X → Y` direction of `pair`.
pub fn kde_scores(pair: &DataPair, config: &KernelConfig) -> Result<ScoreField> {
    pair.validate()?;
    let joint = kde_estimate(&[&pair.xs, &pair.ys], config)?;
    let marg = kde_estimate(&[&pair.xs], config)?;
    let [sx, sy]: [Vec<f64>; 2] = joint.try_into().expect("two coordinates");
    Ok(ScoreField {
        sx_marg: marg.into_iter().next().unwrap(),
        sx_joint: sx,
        sy_joint: sy,
        source: ScoreSource::Kde,
    })
}

/// Both directions from one joint estimate plus the two marginals.
pub fn estimate_score_pair(pair: &DataPair, source: ScoreSource, config: &KernelConfig) -> Result<ScorePair> {
    pair.validate()?;
    let estimate = match source {
        ScoreSource::Stein => stein_estimate,
        ScoreSource::Kde => kde_estimate,
        ScoreSource::Analytic => {
            return Err(Error::InvalidInput(
                "analytic scores need a mechanism oracle".into(),
            ))
        }
    };
    let joint = estimate(&[&pair.xs, &pair.ys], config)?;
    let mx = estimate(&[&pair.xs], config)?.remove(0);
    let my = estimate(&[&pair.ys], config)?.remove(0);
    let [jx, jy]: [Vec<f64>; 2] = joint.try_into().expect("two coordinates");
    Ok(ScorePair::assemble(mx, my, jx, jy, source))
}

/// Location and scale of a mechanism `f_x(ε) = loc(x) + scale(x)·ε` and their
/// derivatives in `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocScale {
    pub loc: f64,
    pub dloc: f64,
    pub scale: f64,
    pub dscale: f64,
}

/// `f_x⁻¹(y)` and its partial derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversePartials {
    pub value: f64,
    pub dx: f64,
    pub dy: f64,
    pub dxy: f64,
    pub dyy: f64,
}

impl LocScale {
    pub fn inverse(&self, y: f64) -> InversePartials {
        let u = (y - self.loc) / self.scale;
        InversePartials {
            value: u,
            dx: -self.dloc / self.scale - u * self.dscale / self.scale,
            dy: 1.0 / self.scale,
            dxy: -self.dscale / (self.scale * self.scale),
            dyy: 0.0,
        }
    }

    /// Velocity of the flow `y ↦ loc(x') + scale(x')/scale(x)·(y − loc(x))`.
    pub fn velocity(&self, y: f64) -> (f64, f64) {
        let rate = self.dscale / self.scale;
        (self.dloc + rate * (y - self.loc), rate)
    }
}

/// Ground truth for a Gaussian-noise mechanism: `X ~ N(0, 1)`,
/// `ε ~ N(0, noise_sd²)`, `Y = loc(X) + scale(X)·ε`.
pub trait MechanismOracle: Send + Sync {
    fn noise_sd(&self) -> f64;

    /// Location-scale form at each `x`; mechanisms without a closed-form
    /// inverse return [`Error::NonInvertibleMechanism`].
    fn location_scale(&self, xs: &[f64]) -> Result<Vec<LocScale>>;

    fn inverse_partials(&self, xs: &[f64], ys: &[f64]) -> Result<Vec<InversePartials>> {
        Ok(self
            .location_scale(xs)?
            .iter()
            .zip(ys)
            .map(|(ls, &y)| ls.inverse(y))
            .collect())
    }

    /// True velocity and its `y`-derivative at each `(ys[i], xs[i])`.
    fn true_velocity(&self, ys: &[f64], xs: &[f64]) -> Result<Vec<(f64, f64)>> {
        Ok(self
            .location_scale(xs)?
            .iter()
            .zip(ys)
            .map(|(ls, &y)| ls.velocity(y))
            .collect())
    }
}

/// Monte Carlo settings for the effect-variable marginal score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticConfig {
    pub mc_draws: usize,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        AnalyticConfig {
            mc_draws: 100_000,
            fd_step: 1e-3,
            seed: 0,
        }
    }
}

/// Closed-form `X → Y` scores: `s_x(x) = −x` and the joint partials from
/// the inverse mechanism.
pub fn analytic_gaussian_scores(pair: &DataPair, oracle: &dyn MechanismOracle) -> Result<ScoreField> {
    pair.validate()?;
    let inv = oracle.inverse_partials(&pair.xs, &pair.ys)?;
    let var = oracle.noise_sd().powi(2);
    let mut sx = Vec::with_capacity(pair.len());
    let mut sy = Vec::with_capacity(pair.len());
    for (x, f) in pair.xs.iter().zip(&inv) {
        let eps_score = -f.value / var;
        sx.push(-x + eps_score * f.dx + f.dxy / f.dy);
        sy.push(eps_score * f.dy + f.dyy / f.dy);
    }
    Ok(ScoreField {
        sx_marg: pair.xs.iter().map(|x| -x).collect(),
        sx_joint: sx,
        sy_joint: sy,
        source: ScoreSource::Analytic,
    })
}

/// Marginal score of the effect, `d/dy log E_x[p(y | x)]`, by Monte Carlo
/// over fresh cause draws and a central difference in `y`.
pub fn analytic_effect_marginal(ys: &[f64], oracle: &dyn MechanismOracle, config: &AnalyticConfig) -> Result<Vec<f64>> {
    if config.mc_draws == 0 || !(config.fd_step > 0.0) {
        return Err(Error::InvalidInput("need mc_draws ≥ 1 and fd_step > 0".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let draws: Vec<f64> = (0..config.mc_draws).map(|_| StandardNormal.sample(&mut rng)).collect();
    let sd = oracle.noise_sd();
    let comps: Vec<(f64, f64, f64)> = oracle
        .location_scale(&draws)?
        .iter()
        .map(|ls| {
            let s = sd * ls.scale.abs();
            (ls.loc, 1.0 / s, -s.ln())
        })
        .collect();
    let log_p = |y: f64| {
        let mut best = f64::NEG_INFINITY;
        let terms: Vec<f64> = comps
            .iter()
            .map(|&(loc, inv_s, log_inv_s)| {
                let u = (y - loc) * inv_s;
                let t = -0.5 * u * u + log_inv_s;
                best = best.max(t);
                t
            })
            .collect();
        best + terms.iter().map(|t| (t - best).exp()).sum::<f64>().ln()
    };
    let h = config.fd_step;
    Ok(ys.iter().map(|&y| (log_p(y + h) - log_p(y - h)) / (2.0 * h)).collect())
}

/// Analytic scores for both directions.
pub fn analytic_score_pair(pair: &DataPair, oracle: &dyn MechanismOracle, config: &AnalyticConfig) -> Result<ScorePair> {
    let fwd = analytic_gaussian_scores(pair, oracle)?;
    let my = analytic_effect_marginal(&pair.ys, oracle, config)?;
    Ok(ScorePair::assemble(fwd.sx_marg, my, fwd.sx_joint, fwd.sy_joint, ScoreSource::Analytic))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Linear {
        slope: f64,
        sd: f64,
    }

    impl MechanismOracle for Linear {
        fn noise_sd(&self) -> f64 {
            self.sd
        }
        fn location_scale(&self, xs: &[f64]) -> Result<Vec<LocScale>> {
            Ok(xs
                .iter()
                .map(|x| LocScale {
                    loc: self.slope * x,
                    dloc: self.slope,
                    scale: 1.0,
                    dscale: 0.0,
                })
                .collect())
        }
    }

    fn normal_sample(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn central_mse(xs: &[f64], est: &[f64]) -> f64 {
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = quantile_sorted(&sorted, 0.05);
        let hi = quantile_sorted(&sorted, 0.95);
        let (sum, cnt) = xs
            .iter()
            .zip(est)
            .filter(|(x, _)| **x >= lo && **x <= hi)
            .fold((0.0, 0usize), |(s, c), (x, e)| (s + (e + x).powi(2), c + 1));
        sum / cnt as f64
    }

    #[test]
    fn median_heuristic_examples() {
        assert_eq!(median_heuristic(&[&[0.0, 1.0, 3.0]]).unwrap(), 2.0);
        assert_eq!(median_heuristic(&[&[0.0, 1.0]]).unwrap(), 1.0);
        assert!(matches!(
            median_heuristic(&[&[2.0; 4]]),
            Err(Error::AllPointsIdentical)
        ));
        // four distances {1, 2, 3, 4}: midpoint of 2 and 3
        assert!((median_heuristic(&[&[0.0, 1.0, 3.0], &[0.0, 0.0, 0.0]]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn stein_two_point_closed_form() {
        let cfg = KernelConfig {
            lengthscale: Lengthscale::Fixed(1.0),
            ..KernelConfig::stein()
        };
        let s = stein_estimate(&[&[0.0, 1.0]], &cfg).unwrap().remove(0);
        // K = [[1, k], [k, 1]], k = e^{-1/2}; B = [-k, k]
        let k = (-0.5f64).exp();
        let (a, c) = (1.1, k);
        let det = a * a - c * c;
        let rhs = [k, -k];
        let expect = [(a * rhs[0] - c * rhs[1]) / det, (-c * rhs[0] + a * rhs[1]) / det];
        assert!((s[0] - expect[0]).abs() < 1e-10 && (s[1] - expect[1]).abs() < 1e-10);
    }

    #[test]
    fn stein_standard_normal() {
        let xs = normal_sample(2000, 11);
        let s = stein_estimate(&[&xs], &KernelConfig::stein()).unwrap().remove(0);
        let mse = central_mse(&xs, &s);
        assert!(mse < 0.15, "mse {mse}");
    }

    #[test]
    fn stein_identical_points() {
        let p = DataPair::new("c", vec![1.0; 4], vec![2.0; 4]).unwrap();
        assert!(matches!(stein_scores(&p, &KernelConfig::stein()), Err(Error::AllPointsIdentical)));
    }

    #[test]
    fn kde_single_kernel_slope() {
        let s = kde_scores_at(&[&[0.0]], &[1.0], 0.0, &[&[1.0]]);
        assert!((s[0][0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn kde_symmetric_pair_zero_at_center() {
        let s = kde_scores_at(&[&[-0.7, 0.7]], &[0.5], 1e-3, &[&[0.0]]);
        assert_eq!(s[0][0], 0.0);
    }

    #[test]
    fn kde_standard_normal() {
        let xs = normal_sample(2000, 12);
        let s = kde_estimate(&[&xs], &KernelConfig::kde()).unwrap().remove(0);
        let mse = central_mse(&xs, &s);
        assert!(mse < 0.25, "mse {mse}");
    }

    #[test]
    fn silverman_rule() {
        let v: Vec<f64> = (0..5).map(f64::from).collect();
        // sd = sqrt(2.5), IQR/1.34 = 2/1.34
        let expect = 0.9 * (2.5f64).sqrt().min(2.0 / 1.34) * 5f64.powf(-0.2);
        assert!((silverman_bandwidth(&v).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..60).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x + rng.random_range(-0.5..0.5)).collect();
        let p = DataPair::new("t", xs.clone(), ys.clone()).unwrap();
        let q = DataPair::new("t", xs.iter().map(|x| x + 3.5).collect(), ys.iter().map(|y| y - 1.25).collect()).unwrap();
        for source in [ScoreSource::Stein, ScoreSource::Kde] {
            let cfg = if source == ScoreSource::Stein { KernelConfig::stein() } else { KernelConfig::kde() };
            let a = estimate_score_pair(&p, source, &cfg).unwrap();
            let b = estimate_score_pair(&q, source, &cfg).unwrap();
            for (u, v) in a.forward.sx_joint.iter().zip(&b.forward.sx_joint)
                .chain(a.forward.sy_joint.iter().zip(&b.forward.sy_joint))
                .chain(a.reverse.sx_marg.iter().zip(&b.reverse.sx_marg))
            {
                assert!((u - v).abs() < 1e-8 * (1.0 + u.abs()), "{source}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn analytic_linear_matches_bivariate_normal() {
        // log p(x, y) = −x²/2 − (y − x)²/2 + const
        let xs = vec![0.3, -1.2, 2.0];
        let ys = vec![1.0, 0.4, 1.5];
        let p = DataPair::new("l", xs.clone(), ys.clone()).unwrap();
        let s = analytic_gaussian_scores(&p, &Linear { slope: 1.0, sd: 1.0 }).unwrap();
        for i in 0..3 {
            let (x, y) = (xs[i], ys[i]);
            assert!((s.sx_marg[i] + x).abs() < 1e-15);
            assert!((s.sx_joint[i] - (-x + (y - x))).abs() < 1e-14);
            assert!((s.sy_joint[i] + (y - x)).abs() < 1e-14);
        }
    }

    #[test]
    fn analytic_identity_mechanism_at_origin() {
        let p = DataPair::new("i", vec![0.0, 0.0], vec![0.8, -1.1]).unwrap();
        let s = analytic_gaussian_scores(&p, &Linear { slope: 0.0, sd: 0.5 }).unwrap();
        assert!((s.sy_joint[0] + 0.8 / 0.25).abs() < 1e-14);
        assert!((s.sy_joint[1] - 1.1 / 0.25).abs() < 1e-14);
    }

    #[test]
    fn analytic_effect_marginal_of_sum() {
        let ys: Vec<f64> = (-4..=4).map(|k| f64::from(k) * 0.5).collect();
        let cfg = AnalyticConfig::default();
        let s = analytic_effect_marginal(&ys, &Linear { slope: 1.0, sd: 1.0 }, &cfg).unwrap();
        for (y, v) in ys.iter().zip(&s) {
            assert!((v + y / 2.0).abs() < 0.05, "y={y}: {v}");
        }
    }

    #[test]
    fn rescaling_follows_chain_rule() {
        let xs = vec![0.3, -1.2, 2.0];
        let ys = vec![1.0, 0.4, 1.5];
        let oracle = Linear { slope: 0.7, sd: 0.6 };
        let p = DataPair::new("l", xs.clone(), ys.clone()).unwrap();
        let raw = analytic_gaussian_scores(&p, &oracle).unwrap().rescaled(2.0, 3.0);
        // X' = X/2 ~ N(0, 1/4), Y' = Y/3 = (0.7·2/3) X' + ε/3
        let scaled = DataPair::new("l", xs.iter().map(|x| x / 2.0).collect(), ys.iter().map(|y| y / 3.0).collect()).unwrap();
        let var_eps = (0.6f64 / 3.0).powi(2);
        let b = 0.7 * 2.0 / 3.0;
        for i in 0..3 {
            let (x, y) = (scaled.xs[i], scaled.ys[i]);
            let r = y - b * x;
            assert!((raw.sx_marg[i] - (-4.0 * x)).abs() < 1e-12);
            assert!((raw.sx_joint[i] - (-4.0 * x + b * r / var_eps)).abs() < 1e-10);
            assert!((raw.sy_joint[i] - (-r / var_eps)).abs() < 1e-10);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = DataPair::new("l", vec![0.5, 1.5], vec![-1.0, 0.25]).unwrap();
        let s = analytic_gaussian_scores(&p, &Linear { slope: 1.0, sd: 1.0 }).unwrap();
        let path = dir.path().join("scores.csv");
        s.write_csv(&p, &path).unwrap();
        let (xs, ys, back) = ScoreField::read_csv(&path).unwrap();
        assert_eq!((xs, ys), (p.xs.clone(), p.ys.clone()));
        assert_eq!(back, s);
    }
}
