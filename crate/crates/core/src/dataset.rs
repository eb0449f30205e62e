//! Bivariate datasets: validation, preprocessing, Tübingen ingestion and the
//! CSV + JSON sidecar format used for generated benchmarks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Causal direction between the two observed coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    XtoY,
    YtoX,
}

impl Direction {
    pub fn reversed(self) -> Self {
        match self {
            Direction::XtoY => Direction::YtoX,
            Direction::YtoX => Direction::XtoY,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::XtoY => "XtoY",
            Direction::YtoX => "YtoX",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "X",
            Axis::Y => "Y",
        })
    }
}

/// `n` paired observations together with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPair {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub truth: Option<Direction>,
    pub weight: f64,
    pub id: String,
    pub seed: Option<u64>,
}

impl DataPair {
    /// Builds a pair with unit weight and no label, checking the length and
    /// finiteness invariants.
    pub fn new(id: impl Into<String>, xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let pair = DataPair {
            xs,
            ys,
            truth: None,
            weight: 1.0,
            id: id.into(),
            seed: None,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn with_truth(mut self, truth: Direction) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.xs.len() != self.ys.len() {
            return Err(Error::InvalidInput(format!(
                "pair {}: {} x values but {} y values",
                self.id,
                self.xs.len(),
                self.ys.len()
            )));
        }
        if self.xs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "pair {}: need at least 2 observations, got {}",
                self.id,
                self.xs.len()
            )));
        }
        if let Some(i) = self
            .xs
            .iter()
            .zip(&self.ys)
            .position(|(x, y)| !x.is_finite() || !y.is_finite())
        {
            return Err(Error::InvalidInput(format!(
                "pair {}: non-finite observation at index {i}",
                self.id
            )));
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "pair {}: weight must be finite and nonnegative",
                self.id
            )));
        }
        Ok(())
    }

    /// The same observations with the coordinate roles exchanged and the
    /// truth label flipped accordingly.
    pub fn swapped(&self) -> DataPair {
        DataPair {
            xs: self.ys.clone(),
            ys: self.xs.clone(),
            truth: self.truth.map(Direction::reversed),
            weight: self.weight,
            id: self.id.clone(),
            seed: self.seed,
        }
    }

    fn select(&self, indices: &[usize]) -> DataPair {
        DataPair {
            xs: indices.iter().map(|&i| self.xs[i]).collect(),
            ys: indices.iter().map(|&i| self.ys[i]).collect(),
            truth: self.truth,
            weight: self.weight,
            id: self.id.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub standardize: bool,
    pub trim_fraction: f64,
    pub subsample_to: Option<usize>,
    pub rng_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            standardize: true,
            trim_fraction: 0.0,
            subsample_to: None,
            rng_seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.trim_fraction) {
            return Err(Error::InvalidInput(format!(
                "trim fraction {} outside [0, 0.5)",
                self.trim_fraction
            )));
        }
        if matches!(self.subsample_to, Some(m) if m < 2) {
            return Err(Error::InvalidInput("subsample size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Affine parameters returned by [`standardize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean_x: f64,
    pub sd_x: f64,
    pub mean_y: f64,
    pub sd_y: f64,
}

impl Standardization {
    pub fn invert(&self, pair: &DataPair) -> DataPair {
        let mut out = pair.clone();
        out.xs.iter_mut().for_each(|x| *x = *x * self.sd_x + self.mean_x);
        out.ys.iter_mut().for_each(|y| *y = *y * self.sd_y + self.mean_y);
        out
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Centers each coordinate and scales it to unit population standard deviation.
pub fn standardize(pair: &DataPair) -> Result<(DataPair, Standardization)> {
    pair.validate()?;
    let (mean_x, sd_x) = mean_sd(&pair.xs);
    let (mean_y, sd_y) = mean_sd(&pair.ys);
    // Relative threshold so that a constant column with rounding noise in the
    // mean still counts as degenerate.
    let degenerate = |sd: f64, mean: f64| sd <= 1e-14 * mean.abs().max(1.0);
    if degenerate(sd_x, mean_x) {
        return Err(Error::DegenerateVariance(Axis::X));
    }
    if degenerate(sd_y, mean_y) {
        return Err(Error::DegenerateVariance(Axis::Y));
    }
    let params = Standardization {
        mean_x,
        sd_x,
        mean_y,
        sd_y,
    };
    let mut out = pair.clone();
    out.xs.iter_mut().for_each(|x| *x = (*x - mean_x) / sd_x);
    out.ys.iter_mut().for_each(|y| *y = (*y - mean_y) / sd_y);
    Ok((out, params))
}

/// Indices of points that survive marginal trimming, in original order.
///
/// Each marginal loses its `ceil(fraction * n / 2)` smallest and largest
/// ranks; ties are ranked by original index.
pub fn trim_mask(xs: &[f64], ys: &[f64], fraction: f64) -> Result<Vec<bool>> {
    if !(0.0..0.5).contains(&fraction) {
        return Err(Error::InvalidInput(format!(
            "trim fraction {fraction} outside [0, 0.5)"
        )));
    }
    let n = xs.len();
    let mut keep = vec![true; n];
    let per_side = (fraction * n as f64 / 2.0 - 1e-9).ceil().max(0.0) as usize;
    if per_side == 0 {
        return Ok(keep);
    }
    for column in [xs, ys] {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| column[a].total_cmp(&column[b]));
        for &i in order.iter().take(per_side).chain(order.iter().rev().take(per_side)) {
            keep[i] = false;
        }
    }
    Ok(keep)
}

pub fn trim_marginal_extremes(pair: &DataPair, fraction: f64) -> Result<DataPair> {
    let keep = trim_mask(&pair.xs, &pair.ys, fraction)?;
    let survivors: Vec<usize> = (0..pair.len()).filter(|&i| keep[i]).collect();
    if survivors.len() < 2 {
        return Err(Error::EmptyResult);
    }
    Ok(pair.select(&survivors))
}

/// Draws `m` points: without replacement (original order kept) when the pair
/// has at least `m` points, with replacement otherwise.
pub fn subsample(pair: &DataPair, m: usize, seed: u64) -> Result<DataPair> {
    if m < 2 {
        return Err(Error::InvalidInput("subsample size must be at least 2".into()));
    }
    let n = pair.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let indices: Vec<usize> = if n >= m {
        let mut idx = index::sample(&mut rng, n, m).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..m).map(|_| rng.random_range(0..n)).collect()
    };
    Ok(pair.select(&indices))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuebingenFilter {
    /// Drops the binary pairs and the multivariate ones.
    Standard,
    /// Additionally drops pairs with discrete-valued variables.
    ContinuousOnly,
}

pub const TUEBINGEN_BINARY: [u32; 3] = [47, 70, 107];
pub const TUEBINGEN_MULTIVARIATE: [u32; 6] = [52, 53, 54, 55, 71, 105];
pub const TUEBINGEN_DISCRETE: [u32; 25] = [
    5, 6, 7, 8, 9, 10, 11, 13, 14, 15, 16, 26, 27, 28, 29, 32, 33, 34, 35, 36, 37, 85, 94, 95, 99,
];

impl TuebingenFilter {
    pub fn excludes(self, id: u32) -> bool {
        let standard = TUEBINGEN_BINARY.contains(&id) || TUEBINGEN_MULTIVARIATE.contains(&id);
        match self {
            TuebingenFilter::Standard => standard,
            TuebingenFilter::ContinuousOnly => standard || TUEBINGEN_DISCRETE.contains(&id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PairMeta {
    cause: (usize, usize),
    effect: (usize, usize),
    weight: f64,
}

fn parse_meta(path: &Path) -> Result<BTreeMap<u32, PairMeta>> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingMeta(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            file: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        if fields.len() != 6 {
            return Err(parse_err(format!("expected 6 fields, found {}", fields.len())));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(format!("not an integer: {s:?}")))
        };
        let id = int(fields[0])? as u32;
        let weight: f64 = fields[5]
            .parse()
            .map_err(|_| parse_err(format!("not a number: {:?}", fields[5])))?;
        out.insert(
            id,
            PairMeta {
                cause: (int(fields[1])?, int(fields[2])?),
                effect: (int(fields[3])?, int(fields[4])?),
                weight,
            },
        );
    }
    Ok(out)
}

fn parse_columns(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    file: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("not a number: {tok:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first().map(|r: &Vec<f64>| r.len()) {
            if first != row.len() {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected {first} columns, found {}", row.len()),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Loads the single-column cause/effect pairs from a Tübingen-style
/// directory (`pairNNNN.txt` files plus `pairmeta.txt`), sorted by id.
pub fn load_tuebingen(dir: impl AsRef<Path>, filter: TuebingenFilter) -> Result<Vec<DataPair>> {
    let dir = dir.as_ref();
    let meta = parse_meta(&dir.join("pairmeta.txt"))?;
    let mut pairs = Vec::new();
    for (&id, m) in &meta {
        if filter.excludes(id) || m.cause.0 != m.cause.1 || m.effect.0 != m.effect.1 {
            continue;
        }
        let (c, e) = (m.cause.0, m.effect.0);
        let truth = match (c, e) {
            (1, 2) => Direction::XtoY,
            (2, 1) => Direction::YtoX,
            _ => continue,
        };
        let path: PathBuf = dir.join(format!("pair{id:04}.txt"));
        let rows = parse_columns(&path)?;
        if rows.first().is_none_or(|r| r.len() < 2) {
            return Err(Error::Parse {
                file: path,
                line: 1,
                message: "expected at least two columns".into(),
            });
        }
        let xs = rows.iter().map(|r| r[0]).collect();
        let ys = rows.iter().map(|r| r[1]).collect();
        let pair = DataPair::new(format!("pair{id:04}"), xs, ys)?
            .with_truth(truth)
            .with_weight(m.weight);
        pairs.push(pair);
    }
    Ok(pairs)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    id: String,
    truth: Option<Direction>,
    weight: f64,
    seed: Option<u64>,
}

fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `x,y` CSV plus a `.json` sidecar with the provenance fields.
pub fn write_pair(pair: &DataPair, csv_path: impl AsRef<Path>) -> Result<()> {
    let csv_path = csv_path.as_ref();
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::Serialization(e.to_string()))?;
    w.write_record(["x", "y"])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    for (x, y) in pair.xs.iter().zip(&pair.ys) {
        w.write_record([crate::io::fmt_f64(*x), crate::io::fmt_f64(*y)])
            .map_err(|e| Error::Serialization(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let sidecar = Sidecar {
        id: pair.id.clone(),
        truth: pair.truth,
        weight: pair.weight,
        seed: pair.seed,
    };
    crate::io::write_json(&sidecar, sidecar_path(csv_path))
}

pub fn read_pair(csv_path: impl AsRef<Path>) -> Result<DataPair> {
    let csv_path = csv_path.as_ref();
    let mut r = csv::Reader::from_path(csv_path).map_err(|e| Error::Serialization(e.to_string()))?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Serialization(e.to_string()))?;
        let field = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse {
                    file: csv_path.to_path_buf(),
                    line: i + 2,
                    message: format!("bad value in column {}", k + 1),
                })
        };
        xs.push(field(0)?);
        ys.push(field(1)?);
    }
    let side = sidecar_path(csv_path);
    let sidecar: Option<Sidecar> = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?)
    } else {
        None
    };
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut pair = DataPair::new(stem, xs, ys)?;
    if let Some(s) = sidecar {
        pair.id = s.id;
        pair.truth = s.truth;
        pair.weight = s.weight;
        pair.seed = s.seed;
    }
    Ok(pair)
}
