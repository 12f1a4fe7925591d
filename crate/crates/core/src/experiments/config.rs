//! Run configuration shared by every command.
//!
//! Settings resolve as defaults, then a config file (JSON or `key = value`
//! lines), then individual overrides. The resolved struct is embedded in
//! every output so a run can be repeated from its own report.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{TargetColumn, TaskKind};
use crate::error::{Error, Result};
use crate::evaluate::Grid2D;
use crate::laplace::GridConfig;
use crate::variational::{Family, SampleScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Laplace,
    MviMu,
    MviEig,
    MviLr,
    ViDiag,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Laplace, Method::MviMu, Method::MviEig, Method::MviLr, Method::ViDiag];

    pub fn name(&self) -> &'static str {
        match self.family() {
            Some(f) => f.name(),
            None => "laplace",
        }
    }

    pub fn family(&self) -> Option<Family> {
        match self {
            Method::Laplace => None,
            Method::MviMu => Some(Family::MviMu),
            Method::MviEig => Some(Family::MviEig),
            Method::MviLr => Some(Family::MviLr),
            Method::ViDiag => Some(Family::ViDiag),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (laplace|mvi_mu|mvi_eig|mvi_lr|vi_diag)")))
    }
}

/// Parses a comma-separated method list, rejecting duplicates.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m: Method = part.parse()?;
        if out.contains(&m) {
            return Err(Error::Config(format!("method '{m}' listed twice")));
        }
        out.push(m);
    }
    if out.is_empty() {
        return Err(Error::Config("method list is empty".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `None` means the command's own default set.
    pub methods: Option<Vec<Method>>,
    /// Method fitted by `fit`.
    pub method: Method,
    /// `S`, the fixed sample count of the training objective.
    pub samples: usize,
    pub sample_scheme: SampleScheme,
    /// `S′`, the fresh draws used for predictive scores.
    pub eval_samples: usize,
    /// Splits for `benchmark`, seeded runs for `cauchy`.
    pub splits: usize,
    pub seed: u64,
    pub grid: GridConfig,
    pub vi_iters: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
    /// Optimise `θ` jointly with the variational parameters.
    pub learn_hyper: bool,
    pub train_fraction: f64,
    pub cauchy_train: usize,
    pub cauchy_test: usize,
    pub bootstrap_resamples: usize,
    pub alpha: f64,
    pub kl_grid: Grid2D,
    pub contour_resolution: usize,
    pub curve_points: usize,
    pub data: Option<PathBuf>,
    pub splits_file: Option<PathBuf>,
    pub task: Option<TaskKind>,
    pub target_column: TargetColumn,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            methods: None,
            method: Method::MviLr,
            samples: 1000,
            sample_scheme: SampleScheme::Iid,
            eval_samples: 10_000,
            splits: 100,
            seed: 0,
            grid: GridConfig::default(),
            vi_iters: 2000,
            grad_tol: 1e-6,
            f_tol: 1e-9,
            learn_hyper: true,
            train_fraction: 0.7,
            cauchy_train: 50,
            cauchy_test: 1000,
            bootstrap_resamples: 10_000,
            alpha: 0.05,
            kl_grid: Grid2D::default(),
            contour_resolution: 201,
            curve_points: 200,
            data: None,
            splits_file: None,
            task: None,
            target_column: TargetColumn::Last,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("'{key}' expects a number, got '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("'{key}' expects true or false, got '{value}'"))),
    }
}

impl RunConfig {
    /// Parses a config file body. JSON objects may be a bare config or any
    /// document with a `config` member (such as an emitted report).
    pub fn from_text(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            let value: serde_json::Value =
                serde_json::from_str(trimmed).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
            let inner = match value.get("config") {
                Some(c) if c.is_object() => c.clone(),
                _ => value,
            };
            let cfg: RunConfig = serde_json::from_value(inner).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
            cfg.validate()?;
            return Ok(cfg);
        }
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Sets one setting by name; `-` and `_` are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "methods" => self.methods = Some(parse_methods(v)?),
            "method" => self.method = v.parse()?,
            "samples" => self.samples = parse_num(&key, v)?,
            "sample_scheme" => {
                self.sample_scheme = match v {
                    "iid" => SampleScheme::Iid,
                    "antithetic" => SampleScheme::Antithetic,
                    "moment_matched" => SampleScheme::MomentMatched,
                    _ => return Err(Error::Config(format!("unknown sample scheme '{v}'"))),
                }
            }
            "eval_samples" => self.eval_samples = parse_num(&key, v)?,
            "splits" | "runs" => self.splits = parse_num(&key, v)?,
            "seed" => self.seed = parse_num(&key, v)?,
            "grid.basis_counts" => {
                self.grid.basis_counts =
                    v.split(',').map(|p| parse_num(&key, p)).collect::<Result<Vec<usize>>>()?;
            }
            "grid.candidates_per_count" => self.grid.candidates_per_count = parse_num(&key, v)?,
            "grid.screening_iters" => self.grid.screening_iters = parse_num(&key, v)?,
            "grid.final_iters" => self.grid.final_iters = parse_num(&key, v)?,
            "grid.samples" => self.grid.samples = parse_num(&key, v)?,
            "vi_iters" => self.vi_iters = parse_num(&key, v)?,
            "grad_tol" => self.grad_tol = parse_num(&key, v)?,
            "f_tol" => self.f_tol = parse_num(&key, v)?,
            "learn_hyper" => self.learn_hyper = parse_bool(&key, v)?,
            "train_fraction" => self.train_fraction = parse_num(&key, v)?,
            "cauchy_train" => self.cauchy_train = parse_num(&key, v)?,
            "cauchy_test" => self.cauchy_test = parse_num(&key, v)?,
            "bootstrap_resamples" => self.bootstrap_resamples = parse_num(&key, v)?,
            "alpha" => self.alpha = parse_num(&key, v)?,
            "kl_grid.lo" => self.kl_grid.lo = parse_num(&key, v)?,
            "kl_grid.hi" => self.kl_grid.hi = parse_num(&key, v)?,
            "kl_grid.resolution" => self.kl_grid.resolution = parse_num(&key, v)?,
            "contour_resolution" => self.contour_resolution = parse_num(&key, v)?,
            "curve_points" => self.curve_points = parse_num(&key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "splits_file" => self.splits_file = Some(PathBuf::from(v)),
            "task" => self.task = Some(v.parse()?),
            "target_column" => {
                self.target_column = match v {
                    "first" => TargetColumn::First,
                    "last" => TargetColumn::Last,
                    _ => TargetColumn::Index(parse_num(&key, v)?),
                }
            }
            _ => return Err(Error::Config(format!("unknown setting '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.samples == 0 || self.eval_samples == 0 {
            return fail("samples and eval_samples must be positive".into());
        }
        if self.sample_scheme != SampleScheme::Iid && self.samples % 2 == 1 {
            return fail(format!("sample scheme {:?} needs an even sample count", self.sample_scheme));
        }
        if self.splits == 0 {
            return fail("splits must be positive".into());
        }
        if self.grid.basis_counts.is_empty() || self.grid.candidates_per_count == 0 || self.grid.samples == 0 {
            return fail("grid needs basis counts, candidates and samples".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if self.cauchy_train == 0 || self.cauchy_test == 0 {
            return fail("cauchy_train and cauchy_test must be positive".into());
        }
        if self.bootstrap_resamples < 1000 {
            return fail("bootstrap_resamples must be at least 1000".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.kl_grid.hi > self.kl_grid.lo) || self.kl_grid.resolution < 2 || self.contour_resolution < 2 {
            return fail("2D grids need hi > lo and at least 2 nodes".into());
        }
        if self.curve_points < 2 {
            return fail("curve_points must be at least 2".into());
        }
        if !(self.grad_tol > 0.0 && self.f_tol > 0.0) || self.vi_iters == 0 {
            return fail("optimiser tolerances and vi_iters must be positive".into());
        }
        Ok(())
    }

    /// The explicit method list, or `default` when none was given.
    pub fn methods_or(&self, default: &[Method]) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| default.to_vec())
    }
}
