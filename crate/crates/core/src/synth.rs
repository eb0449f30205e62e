//! Synthetic benchmark generators.
//!
//! Each dataset is an SCM `Y = f_θ(X, ε)` with one parameter draw per
//! dataset. In the TMI benchmarks the cause and the noise are pushed through
//! independently sampled monotone maps `T(u) = ∫₀ᵘ softplus(g(t)) dt`; the
//! `-Gauss` variants keep both Gaussian so that scores are available in
//! closed form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{DataPair, Direction};
use crate::error::{Error, Result};
use crate::flow::{self, IntegratorConfig};
use crate::mlp::{Mlp, MlpArch};
use crate::scores::{LocScale, MechanismOracle};

const TMI_SD: f64 = 0.3;
const TMI_INTERVALS: usize = 2048;
const TMI_ABS_TOL: f64 = 1e-6;

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Strictly increasing map `T(u) = ∫₀ᵘ softplus(g(t)) dt` with `g` a tanh
/// network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmiMap {
    pub net: Mlp,
    pub intervals: usize,
}

impl TmiMap {
    pub fn arch() -> MlpArch {
        MlpArch::new(1, vec![64, 64, 64])
    }

    /// Network parameters iid `N(0, 0.3²)`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        TmiMap {
            net: Mlp::sample(Self::arch(), TMI_SD, rng),
            intervals: TMI_INTERVALS,
        }
    }

    pub fn from_net(net: Mlp) -> Self {
        TmiMap {
            net,
            intervals: TMI_INTERVALS,
        }
    }

    fn integrand(&self, us: &[f64]) -> Vec<f64> {
        self.net.eval_many(us).into_iter().map(softplus).collect()
    }

    pub fn apply(&self, x: f64) -> Result<f64> {
        Ok(self.apply_many(&[x])?[0])
    }

    /// Evaluates the map at many points from one cumulative trapezoid pass on
    /// a shared grid, refined until the Richardson error estimate is below
    /// `1e-6`.
    pub fn apply_many(&self, xs: &[f64]) -> Result<Vec<f64>> {
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("TMI map needs finite inputs".into()));
        }
        let lo = xs.iter().copied().fold(0.0, f64::min);
        let hi = xs.iter().copied().fold(0.0, f64::max);
        let reach = lo.abs().max(hi);
        if reach == 0.0 {
            return Ok(vec![0.0; xs.len()]);
        }
        let mut intervals = self.intervals.max(2);
        for _ in 0..6 {
            let h = reach / intervals as f64;
            match self.cumulative(xs, lo, hi, h) {
                Some(out) => return Ok(out),
                None => intervals *= 2,
            }
        }
        Err(Error::QuadratureFailure { lo, hi })
    }

    fn cumulative(&self, xs: &[f64], lo: f64, hi: f64, h: f64) -> Option<Vec<f64>> {
        // nodes k·h on each side of the origin, even count per side
        let side = |end: f64| {
            let k = (end.abs() / h).ceil() as usize;
            k + (k % 2)
        };
        let (kl, kr) = (side(lo), side(hi));
        let nodes: Vec<f64> = (0..=kl + kr).map(|i| (i as f64 - kl as f64) * h).collect();
        let f = self.integrand(&nodes);
        // integrals from the origin to every even node, fine and coarse
        let mut fine = vec![0.0; nodes.len()];
        let mut coarse = vec![0.0; nodes.len()];
        let mut worst: f64 = 0.0;
        for i in (kl + 2..=kl + kr).step_by(2) {
            fine[i] = fine[i - 2] + 0.5 * h * (f[i - 2] + 2.0 * f[i - 1] + f[i]);
            coarse[i] = coarse[i - 2] + h * (f[i - 2] + f[i]);
            worst = worst.max((fine[i] - coarse[i]).abs() / 3.0);
        }
        for i in (0..kl).rev().skip(1).step_by(2) {
            fine[i] = fine[i + 2] - 0.5 * h * (f[i] + 2.0 * f[i + 1] + f[i + 2]);
            coarse[i] = coarse[i + 2] - h * (f[i] + f[i + 2]);
            worst = worst.max((fine[i] - coarse[i]).abs() / 3.0);
        }
        if !(worst <= TMI_ABS_TOL) {
            return None;
        }
        let rich: Vec<f64> = fine.iter().zip(&coarse).map(|(a, b)| a + (a - b) / 3.0).collect();
        // Simpson from the even node at or below each point
        let base: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let k = ((x / h).floor() as i64 + kl as i64).clamp(0, (kl + kr) as i64) as usize;
                (k - ((k + kl) % 2)).min(kl + kr - 2)
            })
            .collect();
        let mut probe = Vec::with_capacity(2 * xs.len());
        for (&x, &b) in xs.iter().zip(&base) {
            probe.push(0.5 * (nodes[b] + x));
            probe.push(x);
        }
        let g = self.integrand(&probe);
        Some(
            xs.iter()
                .zip(&base)
                .enumerate()
                .map(|(j, (&x, &b))| {
                    let w = x - nodes[b];
                    rich[b] + w / 6.0 * (f[b] + 4.0 * g[2 * j] + g[2 * j + 1])
                })
                .collect(),
        )
    }
}

/// Samples a TMI map from a seed.
pub fn sample_tmi(seed: u64) -> TmiMap {
    TmiMap::sample(&mut ChaCha20Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BenchmarkFamily {
    Velocity,
    Sigmoid,
    #[serde(rename = "ANM")]
    Anm,
    #[serde(rename = "LSNM")]
    Lsnm,
    #[serde(rename = "ANM-Gauss")]
    AnmGauss,
    #[serde(rename = "LSNM-Gauss")]
    LsnmGauss,
}

impl BenchmarkFamily {
    pub const ALL: [BenchmarkFamily; 6] = [
        BenchmarkFamily::Velocity,
        BenchmarkFamily::Sigmoid,
        BenchmarkFamily::Anm,
        BenchmarkFamily::Lsnm,
        BenchmarkFamily::AnmGauss,
        BenchmarkFamily::LsnmGauss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkFamily::Velocity => "Velocity",
            BenchmarkFamily::Sigmoid => "Sigmoid",
            BenchmarkFamily::Anm => "ANM",
            BenchmarkFamily::Lsnm => "LSNM",
            BenchmarkFamily::AnmGauss => "ANM-Gauss",
            BenchmarkFamily::LsnmGauss => "LSNM-Gauss",
        }
    }

    pub fn is_gaussian(self) -> bool {
        matches!(self, BenchmarkFamily::AnmGauss | BenchmarkFamily::LsnmGauss)
    }

    /// `(σ_θ, σ_y)` of the family.
    pub fn default_scales(self) -> (f64, f64) {
        match self {
            BenchmarkFamily::Velocity => (1.0, 1.0),
            BenchmarkFamily::Sigmoid => (0.2, 3.0),
            _ => (0.2, 0.2),
        }
    }
}

impl fmt::Display for BenchmarkFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchmarkFamily::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown benchmark family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub family: BenchmarkFamily,
    pub n_datasets: usize,
    pub n: usize,
    pub sigma_theta: f64,
    pub sigma_y: f64,
    pub master_seed: u64,
}

impl BenchmarkSpec {
    pub fn new(family: BenchmarkFamily, n_datasets: usize, n: usize, master_seed: u64) -> Self {
        let (sigma_theta, sigma_y) = family.default_scales();
        BenchmarkSpec {
            family,
            n_datasets,
            n,
            sigma_theta,
            sigma_y,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_theta > 0.0 && self.sigma_y > 0.0) {
            return Err(Error::InvalidInput("σ_θ and σ_y must be positive".into()));
        }
        if self.n < 2 {
            return Err(Error::InvalidInput("datasets need at least 2 points".into()));
        }
        Ok(())
    }

    /// Independent random stream for one dataset.
    pub fn rng(&self, index: usize) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(index as u64);
        rng
    }

    pub fn dataset_id(&self, index: usize) -> String {
        format!("{}-{index:04}", self.family.name())
    }
}

/// A sampled mechanism `y = f(x, ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Mechanism {
    /// Flow of `v(y, u) = θᵀ(1, sin u, sin y, cos u, cos y, sin(u + y))`
    /// from `u = 0`, started at `ε`.
    Velocity { theta: [f64; 6] },
    /// `c(x) + e^{−d(x)²} Φ⁻¹(sigmoid(a(x) + e^{−b(x)²} ε))`.
    Sigmoid { a: Mlp, b: Mlp, c: Mlp, d: Mlp },
    /// `m(x) + ε`.
    Anm { m: Mlp },
    /// `m(x) + (e^{−h(x)²} + 0.2) ε`.
    Lsnm { m: Mlp, h: Mlp },
}

/// `Φ⁻¹(sigmoid(t))`, evaluated through the upper tail for large `t` so
/// the quantile stays finite.
fn probit_of_sigmoid(t: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let log_tail = -t.abs() - (-t.abs()).exp().ln_1p();
    let q = if log_tail > -700.0 {
        -std.inverse_cdf(log_tail.exp())
    } else {
        // leading terms of the Gaussian tail expansion
        let l = -2.0 * log_tail;
        (l - l.ln() - (2.0 * std::f64::consts::PI).ln()).sqrt()
    };
    if t >= 0.0 {
        q
    } else {
        -q
    }
}

fn velocity_basis(theta: &[f64; 6], y: f64, u: f64) -> f64 {
    theta[0] + theta[1] * u.sin() + theta[2] * y.sin() + theta[3] * u.cos() + theta[4] * y.cos() + theta[5] * (u + y).sin()
}

impl Mechanism {
    pub fn sample<R: Rng + ?Sized>(family: BenchmarkFamily, sigma_theta: f64, rng: &mut R) -> Self {
        let two = || MlpArch::new(1, vec![64, 64]);
        match family {
            BenchmarkFamily::Velocity => {
                let mut theta = [0.0; 6];
                for t in &mut theta {
                    let z: f64 = StandardNormal.sample(rng);
                    *t = sigma_theta * z;
                }
                Mechanism::Velocity { theta }
            }
            BenchmarkFamily::Sigmoid => Mechanism::Sigmoid {
                a: Mlp::sample(two(), sigma_theta, rng),
                b: Mlp::sample(two(), sigma_theta, rng),
                c: Mlp::sample(two(), sigma_theta, rng),
                d: Mlp::sample(two(), sigma_theta, rng),
            },
            BenchmarkFamily::Anm | BenchmarkFamily::AnmGauss => Mechanism::Anm {
                m: Mlp::sample(MlpArch::new(1, vec![64, 64, 64]), sigma_theta, rng),
            },
            BenchmarkFamily::Lsnm | BenchmarkFamily::LsnmGauss => Mechanism::Lsnm {
                m: Mlp::sample(two(), sigma_theta, rng),
                h: Mlp::sample(two(), sigma_theta, rng),
            },
        }
    }

    /// Effect values for causes `xs` and noise `eps`.
    pub fn apply(&self, xs: &[f64], eps: &[f64], integrator: &IntegratorConfig) -> Result<Vec<f64>> {
        assert_eq!(xs.len(), eps.len());
        match self {
            Mechanism::Velocity { theta } => xs
                .iter()
                .zip(eps)
                .enumerate()
                .map(|(i, (&x, &e))| {
                    flow::integrate_flow(|y, u| velocity_basis(theta, y, u), e, 0.0, x, integrator).map_err(|source| {
                        Error::IntegrationFailure {
                            index: i,
                            source: Box::new(source),
                        }
                    })
                })
                .collect(),
            Mechanism::Sigmoid { a, b, c, d } => {
                let (a, b, c, d) = (a.eval_many(xs), b.eval_many(xs), c.eval_many(xs), d.eval_many(xs));
                Ok((0..xs.len())
                    .map(|i| c[i] + (-d[i] * d[i]).exp() * probit_of_sigmoid(a[i] + (-b[i] * b[i]).exp() * eps[i]))
                    .collect())
            }
            Mechanism::Anm { m } => Ok(m.eval_many(xs).iter().zip(eps).map(|(m, e)| m + e).collect()),
            Mechanism::Lsnm { m, h } => {
                let (m, h) = (m.eval_many(xs), h.eval_many(xs));
                Ok((0..xs.len()).map(|i| m[i] + ((-h[i] * h[i]).exp() + 0.2) * eps[i]).collect())
            }
        }
    }

    /// Closed-form velocity `v(y, x)` where the family has one.
    pub fn true_velocity(&self, y: f64, x: f64) -> Option<f64> {
        match self {
            Mechanism::Velocity { theta } => Some(velocity_basis(theta, y, x)),
            Mechanism::Sigmoid { .. } => None,
            _ => Some(self.location_scale(&[x]).ok()?[0].velocity(y).0),
        }
    }

    fn location_scale(&self, xs: &[f64]) -> Result<Vec<LocScale>> {
        match self {
            Mechanism::Anm { m } => {
                let (mv, md, _) = m.jet2_many(xs);
                Ok((0..xs.len())
                    .map(|i| LocScale {
                        loc: mv[i],
                        dloc: md[i],
                        scale: 1.0,
                        dscale: 0.0,
                    })
                    .collect())
            }
            Mechanism::Lsnm { m, h } => {
                let (mv, md, _) = m.jet2_many(xs);
                let (hv, hd, _) = h.jet2_many(xs);
                Ok((0..xs.len())
                    .map(|i| {
                        let e = (-hv[i] * hv[i]).exp();
                        LocScale {
                            loc: mv[i],
                            dloc: md[i],
                            scale: e + 0.2,
                            dscale: -2.0 * hv[i] * hd[i] * e,
                        }
                    })
                    .collect())
            }
            _ => Err(Error::NonInvertibleMechanism),
        }
    }
}

/// Ground truth for a Gaussian-noise dataset: `X ~ N(0, 1)`,
/// `ε ~ N(0, σ_y²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianOracle {
    pub mechanism: Mechanism,
    pub sigma_y: f64,
}

impl MechanismOracle for GaussianOracle {
    fn noise_sd(&self) -> f64 {
        self.sigma_y
    }

    fn location_scale(&self, xs: &[f64]) -> Result<Vec<LocScale>> {
        self.mechanism.location_scale(xs)
    }
}

/// Draws `n` points from a mechanism with the family's noise model.
pub fn sample_from_mechanism<R: Rng + ?Sized>(
    mechanism: &Mechanism,
    gaussian: bool,
    n: usize,
    sigma_y: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (tx, ty) = if gaussian {
        (None, None)
    } else {
        (Some(TmiMap::sample(rng)), Some(TmiMap::sample(rng)))
    };
    let xi_x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let xi_y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let xs = match &tx {
        Some(t) => t.apply_many(&xi_x)?,
        None => xi_x,
    };
    let eps: Vec<f64> = match &ty {
        Some(t) => t.apply_many(&xi_y)?,
        None => xi_y,
    }
    .into_iter()
    .map(|e| sigma_y * e)
    .collect();
    let ys = mechanism.apply(&xs, &eps, &IntegratorConfig::default())?;
    Ok((xs, ys))
}

fn generate_with_mechanism(spec: &BenchmarkSpec, index: usize) -> Result<(DataPair, Mechanism)> {
    spec.validate()?;
    let mut rng = spec.rng(index);
    let mechanism = Mechanism::sample(spec.family, spec.sigma_theta, &mut rng);
    let (xs, ys) = sample_from_mechanism(&mechanism, spec.family.is_gaussian(), spec.n, spec.sigma_y, &mut rng)?;
    let pair = DataPair::new(spec.dataset_id(index), xs, ys)?
        .with_truth(Direction::XtoY)
        .with_seed(spec.master_seed);
    Ok((pair, mechanism))
}

/// Dataset `index` of the benchmark; a pure function of
/// `(spec, index)`.
pub fn generate_dataset(spec: &BenchmarkSpec, index: usize) -> Result<DataPair> {
    generate_with_mechanism(spec, index).map(|(p, _)| p)
}

/// A Gaussian-noise dataset with its closed-form oracle.
pub fn generate_gaussian_oracle(spec: &BenchmarkSpec, index: usize) -> Result<(DataPair, GaussianOracle)> {
    if !spec.family.is_gaussian() {
        return Err(Error::InvalidInput(format!(
            "{} has no closed-form scores; use ANM-Gauss or LSNM-Gauss",
            spec.family
        )));
    }
    let (pair, mechanism) = generate_with_mechanism(spec, index)?;
    Ok((
        pair,
        GaussianOracle {
            mechanism,
            sigma_y: spec.sigma_y,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub id: String,
    pub file: String,
    pub truth: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: BenchmarkSpec,
    pub datasets: Vec<ManifestEntry>,
}

/// Writes every dataset as `<id>.csv` (with sidecar) plus `manifest.json`.
pub fn write_benchmark(spec: &BenchmarkSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    use rayon::prelude::*;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let datasets = (0..spec.n_datasets)
        .into_par_iter()
        .map(|i| {
            let pair = generate_dataset(spec, i)?;
            let file = format!("{}.csv", pair.id);
            crate::dataset::write_pair(&pair, dir.join(&file))?;
            Ok(ManifestEntry {
                index: i,
                id: pair.id,
                file,
                truth: Direction::XtoY,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        spec: spec.clone(),
        datasets,
    };
    crate::io::write_json(&manifest, dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Reads a benchmark written by [`write_benchmark`].
pub fn read_benchmark(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<DataPair>)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
    let pairs = manifest
        .datasets
        .iter()
        .map(|d| crate::dataset::read_pair(dir.join(&d.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pairs))
}
