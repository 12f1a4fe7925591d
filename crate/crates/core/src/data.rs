//! Dataset ingestion, splitting, standardisation and the synthetic targets.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Conditioned, LogDensity};
use crate::util::{derive_seed, log_sum_exp, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Binary,
    Multiclass,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "binary" => Ok(TaskKind::Binary),
            "multiclass" => Ok(TaskKind::Multiclass),
            other => Err(Error::Config(format!("unknown task '{other}' (regression|binary|multiclass)"))),
        }
    }
}

/// Inputs with targets encoded for the likelihood: reals, `{0,1}`, or one-hot rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub task: TaskKind,
    /// Original label values in class-index order (classification only).
    pub classes: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.select_rows(rows),
            targets: self.targets.select_rows(rows),
            task: self.task,
            classes: self.classes.clone(),
        }
    }
}

/// Which column holds the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetColumn {
    First,
    #[default]
    Last,
    Index(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target: TargetColumn,
    /// Inferred from the labels when absent.
    pub task: Option<TaskKind>,
    /// Auto-detected (first row not numeric) when absent.
    pub header: Option<bool>,
}

pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut ds = parse_csv_dataset(&bytes, schema)?;
    ds.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(ds)
}

pub fn parse_csv_dataset(bytes: &[u8], schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut lines: Vec<u64> = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("CSV: {e}")))?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, usize> =
            record.iter().enumerate().map(|(j, f)| f.parse::<f64>().map_err(|_| j)).collect();
        let first_row = rows.is_empty() && width.is_none();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if first_row && schema.header != Some(false) => {
                width = Some(record.len());
                continue;
            }
            Err(j) => {
                return Err(Error::Data(format!(
                    "line {line}, column {}: '{}' is not a number",
                    j + 1,
                    &record[j]
                )))
            }
        };
        if first_row && schema.header == Some(true) {
            width = Some(record.len());
            continue;
        }
        if let Some(v) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("line {line}, column {}: non-finite value", v + 1)));
        }
        match width {
            Some(w) if w != values.len() => {
                return Err(Error::Data(format!("line {line}: expected {w} fields, found {}", values.len())))
            }
            _ => width = Some(values.len()),
        }
        rows.push(values);
        lines.push(line);
    }
    let width = width.unwrap_or(0);
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    if width < 2 {
        return Err(Error::Data("need at least one input column and a target column".into()));
    }
    let target = match schema.target {
        TargetColumn::First => 0,
        TargetColumn::Last => width - 1,
        TargetColumn::Index(j) if j < width => j,
        TargetColumn::Index(j) => {
            return Err(Error::Data(format!("target column {j} is out of range for {width} columns")))
        }
    };
    let n = rows.len();
    // `+ 0.0` folds −0 into 0 so equal labels share one class
    let labels: Vec<f64> = rows.iter().map(|r| r[target] + 0.0).collect();
    let inputs = DMatrix::from_fn(n, width - 1, |i, j| rows[i][if j < target { j } else { j + 1 }]);
    let (task, targets, classes) = encode_targets(&labels, schema.task, &lines)?;
    Ok(Dataset { name: String::new(), inputs, targets, task, classes })
}

fn encode_targets(labels: &[f64], task: Option<TaskKind>, lines: &[u64]) -> Result<(TaskKind, DMatrix<f64>, Vec<f64>)> {
    let mut distinct: Vec<f64> = labels.to_vec();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    let integral = labels.iter().all(|v| v.fract() == 0.0);
    let binary_like = distinct.iter().all(|&v| v == -1.0 || v == 1.0) || distinct.iter().all(|&v| v == 0.0 || v == 1.0);
    let task = task.unwrap_or(if binary_like {
        TaskKind::Binary
    } else if integral && distinct.len() <= 50 {
        TaskKind::Multiclass
    } else {
        TaskKind::Regression
    });
    let n = labels.len();
    match task {
        TaskKind::Regression => Ok((task, DMatrix::from_column_slice(n, 1, labels), Vec::new())),
        TaskKind::Binary => {
            let pm = distinct.iter().any(|&v| v == -1.0);
            let mut y = DMatrix::zeros(n, 1);
            for (i, &v) in labels.iter().enumerate() {
                y[(i, 0)] = match (v, pm) {
                    (1.0, _) => 1.0,
                    (-1.0, true) | (0.0, false) => 0.0,
                    _ => {
                        return Err(Error::Data(format!(
                            "line {}: label {v} is not a binary label (expected ±1 or 0/1)",
                            lines[i]
                        )))
                    }
                };
            }
            let classes = if pm { vec![-1.0, 1.0] } else { vec![0.0, 1.0] };
            Ok((task, y, classes))
        }
        TaskKind::Multiclass => {
            if let Some(i) = labels.iter().position(|v| v.fract() != 0.0) {
                return Err(Error::Data(format!("line {}: class label {} is not an integer", lines[i], labels[i])));
            }
            if distinct.len() < 2 {
                return Err(Error::Data("multiclass data needs at least two classes".into()));
            }
            let mut y = DMatrix::zeros(n, distinct.len());
            for (i, v) in labels.iter().enumerate() {
                let k = distinct.binary_search_by(|c| c.total_cmp(v)).expect("label is in its own set");
                y[(i, k)] = 1.0;
            }
            Ok((task, y, distinct))
        }
    }
}

/// Zero-based train and test row indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `count` seeded random subsamples with `round(fraction · n)` training rows.
pub fn random_splits(n: usize, count: usize, train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} of {n} rows leaves an empty train or test set"
        )));
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(seed, i as u64));
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut train = idx[..n_train].to_vec();
            let mut test = idx[n_train..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            Split { train, test }
        })
        .collect())
}

/// One split per non-empty line: whitespace-separated 1-based training
/// indices; the test set is the complement.
pub fn parse_split_indices(text: &str, n: usize) -> Result<Vec<Split>> {
    let mut splits = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut seen = vec![false; n];
        for tok in line.split_whitespace() {
            // some published split files write indices as floats
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Data(format!("split file line {}: '{tok}' is not an index", lineno + 1)))?;
            if v.fract() != 0.0 || v < 1.0 || v > n as f64 {
                return Err(Error::Data(format!(
                    "split file line {}: index {tok} outside 1..={n}",
                    lineno + 1
                )));
            }
            let i = v as usize - 1;
            if seen[i] {
                return Err(Error::Data(format!("split file line {}: index {tok} repeated", lineno + 1)));
            }
            seen[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|&i| seen[i]).collect();
        let test: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
        if test.is_empty() {
            return Err(Error::Data(format!("split file line {}: no rows left for testing", lineno + 1)));
        }
        splits.push(Split { train, test });
    }
    if splits.is_empty() {
        return Err(Error::Data("split file contains no splits".into()));
    }
    Ok(splits)
}

pub fn read_split_file(path: &Path, n: usize) -> Result<Vec<Split>> {
    parse_split_indices(&std::fs::read_to_string(path)?, n)
}

/// Column means and standard deviations (`N − 1` denominator) of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut sd = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let var = if x.nrows() > 1 { col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            mean.push(m);
            // constant columns are only centred
            sd.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, sd }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.sd[j])
    }
}

/// Training and test portions of one split, standardised with training statistics.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub standardizer: Standardizer,
}

pub fn standardize_split(dataset: &Dataset, split: &Split) -> Result<PreparedSplit> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Data("split has an empty train or test portion".into()));
    }
    if let Some(&i) = split.train.iter().chain(&split.test).find(|&&i| i >= dataset.len()) {
        return Err(Error::Data(format!("split index {i} exceeds dataset size {}", dataset.len())));
    }
    let mut train = dataset.subset(&split.train);
    let mut test = dataset.subset(&split.test);
    let standardizer = Standardizer::fit(&train.inputs);
    train.inputs = standardizer.apply(&train.inputs);
    test.inputs = standardizer.apply(&test.inputs);
    Ok(PreparedSplit { train, test, standardizer })
}

/// Noise-free regression curve of the synthetic robust-regression task.
pub fn cauchy_curve(x: f64) -> f64 {
    0.3 * x * (0.7 * x).sin() - 0.03 * x * x
}

/// `n` training and `n_test` test points: `x ~ U[−10, 10]`,
/// `y = curve(x) + U[−0.5, 0.5]`.
pub fn generate_cauchy_task(n: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n == 0 || n_test == 0 {
        return Err(Error::InvalidArgument("both sample sizes must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut make = |count: usize, name: &str| {
        let x: Vec<f64> = (0..count).map(|_| rng.random_range(-10.0..=10.0)).collect();
        let y: Vec<f64> = x.iter().map(|&v| cauchy_curve(v) + rng.random_range(-0.5..=0.5)).collect();
        Dataset {
            name: name.into(),
            inputs: DMatrix::from_column_slice(count, 1, &x),
            targets: DMatrix::from_column_slice(count, 1, &y),
            task: TaskKind::Regression,
            classes: Vec::new(),
        }
    };
    let train = make(n, "cauchy_train");
    let test = make(n_test, "cauchy_test");
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    log_weight: f64,
    mean: Vector2<f64>,
    precision: Matrix2<f64>,
    log_norm: f64,
}

/// A normalised mixture of bivariate Gaussians usable as a target density.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture2D {
    components: Vec<Component>,
}

pub type MixturePart = (f64, [f64; 2], [[f64; 2]; 2]);

impl Mixture2D {
    /// `parts` are `(weight, mean, covariance)` triples.
    pub fn new(parts: &[MixturePart]) -> Result<Self> {
        let total: f64 = parts.iter().map(|p| p.0).sum();
        if parts.is_empty() || parts.iter().any(|p| !(p.0 > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument("mixture weights must be positive and sum to one".into()));
        }
        let mut components = Vec::new();
        for &(w, m, c) in parts {
            let cov = Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]);
            let det = cov.determinant();
            let precision = cov
                .try_inverse()
                .filter(|_| det > 0.0 && cov[(0, 0)] > 0.0)
                .ok_or_else(|| Error::InvalidArgument("component covariance is not positive definite".into()))?;
            components.push(Component {
                log_weight: w.ln(),
                mean: Vector2::new(m[0], m[1]),
                precision,
                log_norm: -(2.0 * PI).ln() - 0.5 * det.ln(),
            });
        }
        Ok(Self { components })
    }

    /// `2/3 N(0, I) + 1/3 N((−1, −2), diag(3.5, 0.3))`.
    pub fn demo() -> Self {
        Self::new(&[
            (2.0 / 3.0, [0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]),
            (1.0 / 3.0, [-1.0, -2.0], [[3.5, 0.0], [0.0, 0.3]]),
        ])
        .expect("valid mixture")
    }

    /// Per-component `ln w_k + ln N_k(x)` and `−P_k (x − m_k)`.
    fn terms(&self, x: &Vector2<f64>) -> Vec<(f64, Vector2<f64>)> {
        self.components
            .iter()
            .map(|c| {
                let d = x - c.mean;
                let pd = c.precision * d;
                (c.log_weight + c.log_norm - 0.5 * d.dot(&pd), -pd)
            })
            .collect()
    }

    pub fn log_density(&self, x: f64, y: f64) -> f64 {
        let t = self.terms(&Vector2::new(x, y));
        let logs: Vec<f64> = t.iter().map(|p| p.0).collect();
        log_sum_exp(&logs)
    }
}

impl LogDensity for Mixture2D {
    fn dim(&self) -> usize {
        2
    }

    fn hyper_dim(&self) -> usize {
        0
    }

    fn condition(&self, log_hyper: &[f64]) -> Result<Box<dyn Conditioned + '_>> {
        if !log_hyper.is_empty() {
            return Err(Error::InvalidArgument("the mixture target has no hyperparameters".into()));
        }
        Ok(Box::new(self))
    }
}

impl Conditioned for &Mixture2D {
    fn dim(&self) -> usize {
        2
    }

    fn hyper_dim(&self) -> usize {
        0
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.log_density(w[0], w[1])
    }

    fn gradient(&self, w: &[f64], grad_w: &mut [f64], _grad_hyper: &mut [f64]) -> f64 {
        let t = self.terms(&Vector2::new(w[0], w[1]));
        let logs: Vec<f64> = t.iter().map(|p| p.0).collect();
        let lse = log_sum_exp(&logs);
        let mut g = Vector2::zeros();
        for (l, gk) in &t {
            g += gk * (l - lse).exp();
        }
        grad_w.copy_from_slice(g.as_slice());
        lse
    }

    fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        // Σ r_k (g_k g_kᵀ − P_k) − g gᵀ with responsibilities r_k
        let t = self.terms(&Vector2::new(w[0], w[1]));
        let logs: Vec<f64> = t.iter().map(|p| p.0).collect();
        let lse = log_sum_exp(&logs);
        let mut g = Vector2::zeros();
        let mut h = Matrix2::zeros();
        for ((l, gk), c) in t.iter().zip(&self.components) {
            let r = (l - lse).exp();
            g += gk * r;
            h += (gk * gk.transpose() - c.precision) * r;
        }
        h -= g * g.transpose();
        DMatrix::from_column_slice(2, 2, h.as_slice())
    }
}
