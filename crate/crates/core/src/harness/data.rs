//! Synthetic generators, CSV ingestion, train/eval splits and stratified
//! subsampling.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::error::{Error, Result};
use crate::model::{Dataset, Labels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvTask {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Generator {
    /// Balanced classes, unit-covariance Gaussians with means `±separation/2`
    /// on the first axis.
    TwoGaussians { d: usize, separation: f64, n: usize },
    /// Two interleaved half circles in the plane plus isotropic noise.
    TwoMoons { noise: f64, n: usize },
    /// `y = w*·x + noise·z` with `w*`, `x`, `z` standard normal.
    LinearRegression { d: usize, noise: f64, n: usize },
    /// Header row; the last column is the label, the others numeric
    /// features.
    Csv { path: PathBuf, task: CsvTask },
}

/// Out-of-domain eval set: the eval split translated along every axis by
/// `translate` training standard deviations, then rotated by `rotate`
/// radians in the plane of the first two features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShift {
    pub translate: f64,
    pub rotate: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            translate: 1.0,
            rotate: 0.0,
        }
    }
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    #[serde(flatten)]
    pub generator: Generator,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<DomainShift>,
    /// Shift applied to every generated example before splitting, making the
    /// whole task a shifted domain of the generator (e.g. a source task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<DomainShift>,
}

impl DataSpec {
    pub fn new(generator: Generator) -> Self {
        Self {
            generator,
            train_fraction: default_train_fraction(),
            shift: None,
            transform: None,
        }
    }

    pub fn with_shift(mut self, shift: DomainShift) -> Self {
        self.shift = Some(shift);
        self
    }

    pub fn with_transform(mut self, transform: DomainShift) -> Self {
        self.transform = Some(transform);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match &self.generator {
            Generator::TwoGaussians { d, n, separation } => {
                if *d == 0 || *n < 2 || !separation.is_finite() {
                    return bad("two_gaussians needs d >= 1, n >= 2 and a finite separation");
                }
            }
            Generator::TwoMoons { noise, n } => {
                if *n < 2 || !(*noise >= 0.0) {
                    return bad("two_moons needs n >= 2 and noise >= 0");
                }
            }
            Generator::LinearRegression { d, noise, n } => {
                if *d == 0 || *n < 2 || !(*noise >= 0.0) {
                    return bad("linear_regression needs d >= 1, n >= 2 and noise >= 0");
                }
            }
            Generator::Csv { .. } => {}
        }
        for s in self.shift.iter().chain(&self.transform) {
            if !s.translate.is_finite() || !s.rotate.is_finite() {
                return bad("domain shift must be finite");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
    /// Shifted copy of `eval`, present when `shift` is set.
    pub shifted: Option<Dataset>,
}

/// Generates (or reads) the data, applies the optional transform, splits it `floor(train_fraction·n)` /
/// rest in generation order and builds the shifted eval set.
pub fn make_dataset(spec: &DataSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    let mut full = match &spec.generator {
        Generator::TwoGaussians { d, separation, n } => two_gaussians(*d, *separation, *n, seed)?,
        Generator::TwoMoons { noise, n } => two_moons(*noise, *n, seed)?,
        Generator::LinearRegression { d, noise, n } => linear_regression(*d, *noise, *n, seed)?,
        Generator::Csv { path, task } => read_csv(path, *task)?,
    };
    if let Some(t) = &spec.transform {
        full = shift_domain(&full, &full, t)?;
    }
    let n = full.len();
    let n_train = (spec.train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "split of {n} examples leaves an empty side"
        )));
    }
    let train = full.select(&(0..n_train).collect::<Vec<_>>());
    let eval = full.select(&(n_train..n).collect::<Vec<_>>());
    let shifted = spec
        .shift
        .as_ref()
        .map(|s| shift_domain(&train, &eval, s))
        .transpose()?;
    Ok(Splits {
        train,
        eval,
        shifted,
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn two_gaussians(d: usize, separation: f64, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "two_gaussians"));
    let mut x = Vec::with_capacity(n * d);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &y in &labels {
        let center = if y == 1 {
            separation / 2.0
        } else {
            -separation / 2.0
        };
        for j in 0..d {
            x.push(normal(&mut rng) + if j == 0 { center } else { 0.0 });
        }
    }
    Dataset::classification(x, d, labels)
}

/// Angles are drawn uniformly on [0, π]; class 0 is the upper arc
/// `(cos t, sin t)`, class 1 the lower arc `(1 - cos t, 0.5 - sin t)`.
pub fn two_moons(noise: f64, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "two_moons"));
    let mut x = Vec::with_capacity(2 * n);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &y in &labels {
        let t = rng.random::<f64>() * std::f64::consts::PI;
        let (a, b) = if y == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x.push(a + noise * normal(&mut rng));
        x.push(b + noise * normal(&mut rng));
    }
    Dataset::classification(x, 2, labels)
}

pub fn linear_regression(d: usize, noise: f64, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "linear_regression"));
    let w: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        y.push(row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + noise * normal(&mut rng));
        x.extend(row);
    }
    Dataset::regression(x, d, y)
}

pub fn read_csv(path: &Path, task: CsvTask) -> Result<Dataset> {
    let malformed = |detail: String| Error::MalformedCsv {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| malformed(e.to_string()))?;
    let width = reader
        .headers()
        .map_err(|e| malformed(e.to_string()))?
        .len();
    if width < 2 {
        return Err(malformed(
            "need at least one feature column and a label column".into(),
        ));
    }
    let mut features = Vec::new();
    let mut classes = Vec::new();
    let mut targets = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed(e.to_string()))?;
        let line = row + 2;
        if record.len() != width {
            return Err(malformed(format!(
                "line {line}: expected {width} fields, found {}",
                record.len()
            )));
        }
        for field in record.iter().take(width - 1) {
            let v: f64 = field
                .parse()
                .map_err(|_| malformed(format!("line {line}: {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(malformed(format!("line {line}: non-finite feature")));
            }
            features.push(v);
        }
        let label = &record[width - 1];
        match task {
            CsvTask::Classification => classes.push(label.parse::<usize>().map_err(|_| {
                malformed(format!("line {line}: label {label:?} is not a class index"))
            })?),
            CsvTask::Regression => targets.push(
                label
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        malformed(format!(
                            "line {line}: target {label:?} is not a finite number"
                        ))
                    })?,
            ),
        }
    }
    let labels = match task {
        CsvTask::Classification => Labels::Classes(classes),
        CsvTask::Regression => Labels::Targets(targets),
    };
    if labels.is_empty() {
        return Err(malformed("no data rows".into()));
    }
    Dataset::new(features, width - 1, labels)
}

/// `eval` translated by `shift.translate` standard deviations of `reference`
/// per axis, then rotated.
fn shift_domain(reference: &Dataset, eval: &Dataset, shift: &DomainShift) -> Result<Dataset> {
    let d = reference.dim();
    let n = reference.len() as f64;
    let mut std = vec![0.0; d];
    for j in 0..d {
        let mean = (0..reference.len())
            .map(|i| reference.row(i)[j])
            .sum::<f64>()
            / n;
        let var = (0..reference.len())
            .map(|i| (reference.row(i)[j] - mean).powi(2))
            .sum::<f64>()
            / n;
        std[j] = var.sqrt();
    }
    let (sin, cos) = shift.rotate.sin_cos();
    let mut x = Vec::with_capacity(eval.features().len());
    for i in 0..eval.len() {
        let mut row: Vec<f64> = eval
            .row(i)
            .iter()
            .zip(&std)
            .map(|(v, s)| v + shift.translate * s)
            .collect();
        if d >= 2 {
            let (a, b) = (row[0], row[1]);
            row[0] = cos * a - sin * b;
            row[1] = sin * a + cos * b;
        }
        x.extend(row);
    }
    Dataset::new(x, d, eval.labels().clone())
}

/// `n` examples, stratified by class for classification (largest-remainder
/// quotas, ties to the lower class) and uniform for regression. Selected
/// examples keep their original order.
pub fn subsample(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let total = data.len();
    if n == 0 || n > total {
        return Err(Error::invalid(format!(
            "subsample size {n} outside 1..={total}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "subsample"));
    let mut chosen: Vec<usize> = match data.labels() {
        Labels::Targets(_) => sample(&mut rng, total, n).into_vec(),
        Labels::Classes(labels) => {
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            let mut members = vec![Vec::new(); classes];
            for (i, &c) in labels.iter().enumerate() {
                members[c].push(i);
            }
            let exact: Vec<f64> = members
                .iter()
                .map(|m| n as f64 * m.len() as f64 / total as f64)
                .collect();
            let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
            let mut order: Vec<usize> = (0..classes).collect();
            order.sort_by(|&a, &b| {
                (exact[b] - exact[b].floor())
                    .total_cmp(&(exact[a] - exact[a].floor()))
                    .then(a.cmp(&b))
            });
            let mut missing = n - quota.iter().sum::<usize>();
            for &c in order.iter().cycle() {
                if missing == 0 {
                    break;
                }
                if quota[c] < members[c].len() {
                    quota[c] += 1;
                    missing -= 1;
                }
            }
            members
                .iter()
                .zip(&quota)
                .flat_map(|(m, &k)| {
                    sample(&mut rng, m.len(), k)
                        .into_iter()
                        .map(|j| m[j])
                        .collect::<Vec<_>>()
                })
                .collect()
        }
    };
    chosen.sort_unstable();
    Ok(data.select(&chosen))
}
