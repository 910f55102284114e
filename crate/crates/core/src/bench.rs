//! Monte Carlo benchmark harness.
//!
//! Every run draws one truth trajectory and feeds the same measurements to
//! every filter in the bank, so comparisons are paired. Runs are independent
//! and executed in parallel; all reductions happen afterwards in run-index
//! order, which keeps the output identical for any thread count.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::bandwidth::{
    BandwidthGrid, GridError, DEFAULT_GRID_COUNT, DEFAULT_GRID_MAX, DEFAULT_GRID_MIN,
    DEFAULT_SIGMA_C,
};
use crate::diagnostics::{grammians, risk_positive, stability_condition};
use crate::filter::{
    cholesky_lower, step_with_halving, BandwidthPolicy, FilterConfig, FilterError, FilterState,
    HalvingPolicy, DEFAULT_EPSILON, DEFAULT_T_MAX,
};
use crate::noise::{is_symmetric, GaussianMixture, MixtureError};
use crate::system::{simulate, ModelError, UncertainLinearModel};

pub const DEFAULT_RUNS: usize = 100;
pub const DEFAULT_SEED: u64 = 20_240_601;
pub const DEFAULT_MU1: f64 = 0.01;
pub const DEFAULT_MU2: f64 = 1.0;
pub const DEFAULT_FIXED_SIGMA: f64 = 5.0;
pub const DEFAULT_MAX_HALVINGS: u32 = 40;
pub const DEFAULT_RISK_MARGIN: f64 = 0.01;
pub const DEFAULT_WINDOW: usize = 5;

/// Smallest eigenvalue tolerated in an emitted posterior covariance.
pub const COVARIANCE_FLOOR: f64 = -1e-10;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown problem '{0}' (expected problem1 or problem2)")]
    UnknownProblem(String),
    #[error("unknown filter '{0}' (expected kf, rskf, mckf, rmckf-fk, mckf-sk or rmckf-sk)")]
    UnknownFilter(String),
    #[error("config key '{key}': {message}")]
    Config { key: String, message: String },
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("every run failed at delta={delta}")]
    AllRunsFailed { delta: f64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn config_error(key: &str, message: impl Into<String>) -> BenchError {
    BenchError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

/// The two benchmark scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Problem {
    /// Two-state system with an uncertain coupling term.
    Problem1,
    /// Constant-acceleration tracking with uncertain velocity/acceleration coupling.
    Problem2,
}

impl Problem {
    pub fn name(self) -> &'static str {
        match self {
            Problem::Problem1 => "problem1",
            Problem::Problem2 => "problem2",
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            Problem::Problem1 => 500,
            Problem::Problem2 => 200,
        }
    }

    pub fn default_deltas(self) -> Vec<f64> {
        match self {
            Problem::Problem1 => vec![0.0, 0.3, 0.5],
            Problem::Problem2 => vec![0.0, 0.05],
        }
    }
}

impl FromStr for Problem {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "problem1" => Ok(Problem::Problem1),
            "problem2" => Ok(Problem::Problem2),
            other => Err(BenchError::UnknownProblem(other.to_string())),
        }
    }
}

/// The filter bank members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FilterKind {
    Kf,
    Rskf,
    Mckf,
    RmckfFk,
    MckfSk,
    RmckfSk,
}

impl FilterKind {
    pub const ALL: [FilterKind; 6] = [
        FilterKind::Kf,
        FilterKind::Rskf,
        FilterKind::Mckf,
        FilterKind::RmckfFk,
        FilterKind::MckfSk,
        FilterKind::RmckfSk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Kf => "kf",
            FilterKind::Rskf => "rskf",
            FilterKind::Mckf => "mckf",
            FilterKind::RmckfFk => "rmckf-fk",
            FilterKind::MckfSk => "mckf-sk",
            FilterKind::RmckfSk => "rmckf-sk",
        }
    }

    pub fn config(self, params: &FilterParams) -> FilterConfig {
        let base = FilterConfig {
            mu2: params.mu2,
            epsilon: params.epsilon,
            t_max: params.t_max,
            ..FilterConfig::kalman()
        };
        let selected = BandwidthPolicy::Selected(params.grid.clone());
        match self {
            FilterKind::Kf => base,
            FilterKind::Rskf => FilterConfig {
                mu1: params.mu1,
                ..base
            },
            FilterKind::Mckf => base.with_bandwidth(BandwidthPolicy::Fixed(params.sigma)),
            FilterKind::RmckfFk => FilterConfig {
                mu1: params.mu1,
                ..base
            }
            .with_bandwidth(BandwidthPolicy::Fixed(params.sigma)),
            FilterKind::MckfSk => base.with_bandwidth(selected),
            FilterKind::RmckfSk => FilterConfig {
                mu1: params.mu1,
                ..base
            }
            .with_bandwidth(selected),
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        FilterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| BenchError::UnknownFilter(s.to_string()))
    }
}

/// Shared tuning of the filter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterParams {
    pub mu1: f64,
    pub mu2: f64,
    /// Bandwidth of the fixed-kernel filters.
    pub sigma: f64,
    pub grid: BandwidthGrid,
    pub epsilon: f64,
    pub t_max: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            mu1: DEFAULT_MU1,
            mu2: DEFAULT_MU2,
            sigma: DEFAULT_FIXED_SIGMA,
            grid: BandwidthGrid::default(),
            epsilon: DEFAULT_EPSILON,
            t_max: DEFAULT_T_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSpec {
    pub name: String,
    pub config: FilterConfig,
}

/// How the uncertainty scalar of a sweep maps to `dF`.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    /// `[[0, delta], [0, 0]]`.
    Coupling,
    /// `[[0, 0, d1 T^2], [0, 0, delta T], [0, 0, 0]]` with
    /// `d1 = 0.005 sign(delta)` pinned at its bound.
    ConstantAcceleration { t: f64 },
    /// `delta * M`.
    Scaled(DMatrix<f64>),
}

impl Perturbation {
    pub fn matrix(&self, n: usize, delta: f64) -> DMatrix<f64> {
        match self {
            Perturbation::Coupling => {
                let mut m = DMatrix::zeros(n, n);
                m[(0, 1)] = delta;
                m
            }
            Perturbation::ConstantAcceleration { t } => {
                let d1 = 0.005 * if delta < 0.0 { -1.0 } else { 1.0 };
                let mut m = DMatrix::zeros(n, n);
                m[(0, 2)] = d1 * t * t;
                m[(1, 2)] = delta * t;
                m
            }
            Perturbation::Scaled(base) => base * delta,
        }
    }
}

/// Named subset of states whose RMSEs are combined as `sqrt(sum_j MSE_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGroup {
    pub name: String,
    pub states: Vec<usize>,
}

impl StateGroup {
    pub fn new(name: &str, states: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            states: states.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub name: String,
    /// Model with `dF = 0`; each sweep value installs its own perturbation.
    pub model: UncertainLinearModel,
    pub perturbation: Perturbation,
    pub x0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub steps: usize,
    pub runs: usize,
    pub filters: Vec<FilterSpec>,
    pub delta_sweep: Vec<f64>,
    pub seed: u64,
    pub state_names: Vec<String>,
    pub table_groups: Vec<StateGroup>,
    pub halving: HalvingPolicy,
    /// Window of the Grammian and stability diagnostics.
    pub window: usize,
    /// Keep every per-step candidate score of the selected-bandwidth filters.
    pub record_selection: bool,
    /// Resolved settings written to the manifest.
    pub settings: Settings,
}

impl Experiment {
    pub fn validate(&self) -> Result<(), BenchError> {
        let n = self.model.state_dim();
        let bad = |m: String| Err(BenchError::InvalidExperiment(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.x0.len() != n || self.p0.nrows() != n || self.p0.ncols() != n {
            return bad(format!("x0/P0 must have dimension {n}"));
        }
        if cholesky_lower(&self.p0).is_none() || !is_symmetric(&self.p0, 1e-10) {
            return bad("P0 must be symmetric positive definite".into());
        }
        if self.filters.is_empty() {
            return bad("at least one filter is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for spec in &self.filters {
            if !seen.insert(spec.name.as_str()) {
                return bad(format!("duplicate filter name '{}'", spec.name));
            }
            spec.config.validate()?;
        }
        if self.state_names.len() != n {
            return bad(format!("expected {n} state names"));
        }
        for g in &self.table_groups {
            if g.states.is_empty() || g.states.iter().any(|&j| j >= n) {
                return bad(format!("state group '{}' is out of range", g.name));
            }
        }
        if !(self.halving.margin > 0.0 && self.halving.margin <= 1.0) {
            return bad(format!(
                "risk_margin must be in (0, 1], got {}",
                self.halving.margin
            ));
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        for &d in &self.delta_sweep {
            if !d.is_finite() {
                return bad(format!("non-finite delta {d}"));
            }
        }
        Ok(())
    }

    /// Model with the perturbation for `delta` installed.
    pub fn model_at(&self, delta: f64) -> Result<UncertainLinearModel, BenchError> {
        let n = self.model.state_dim();
        Ok(self
            .model
            .with_delta_f(self.perturbation.matrix(n, delta))?)
    }

    /// Human-readable parameterization.
    pub fn describe(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let _ = writeln!(s, "problem: {}", self.name);
        let _ = writeln!(s, "F = {}", fmt_matrix(m.f()));
        let delta_f = match &self.perturbation {
            Perturbation::Coupling => "[[0, delta], [0, 0]]".to_string(),
            Perturbation::ConstantAcceleration { t } => {
                format!(
                    "[[0, 0, d1*{}], [0, 0, delta*{t}], [0, 0, 0]], d1 = 0.005*sign(delta)",
                    t * t
                )
            }
            Perturbation::Scaled(b) => format!("delta * {}", fmt_matrix(b)),
        };
        let _ = writeln!(s, "dF = {delta_f}");
        let _ = writeln!(s, "G = {}", fmt_matrix(m.g()));
        let _ = writeln!(s, "H = {}", fmt_matrix(m.h()));
        let _ = writeln!(s, "q ~ {}", fmt_mixture(m.q_mix()));
        let _ = writeln!(s, "r ~ {}", fmt_mixture(m.r_mix()));
        let _ = writeln!(
            s,
            "Q_equiv (state) = {}",
            fmt_matrix(&m.process_covariance())
        );
        let _ = writeln!(s, "R_equiv = {}", fmt_matrix(&m.measurement_covariance()));
        let _ = writeln!(s, "x0 = {}", fmt_list(self.x0.as_slice()));
        let _ = writeln!(s, "P0 = {}", fmt_matrix(&self.p0));
        let _ = writeln!(s, "states = {}", self.state_names.join(","));
        let groups: Vec<String> = self
            .table_groups
            .iter()
            .map(|g| {
                format!(
                    "{}:{}",
                    g.name,
                    g.states
                        .iter()
                        .map(|j| self.state_names[*j].as_str())
                        .collect::<Vec<_>>()
                        .join("+")
                )
            })
            .collect();
        let _ = writeln!(s, "table groups = {}", groups.join(" "));
        for (key, value) in self.settings.to_pairs() {
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }
}

fn fmt_list(v: &[f64]) -> String {
    format!(
        "[{}]",
        v.iter()
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(", ")
    )
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| fmt_list(&r.iter().copied().collect::<Vec<_>>()))
        .collect();
    format!("[{}]", rows.join(", "))
}

fn fmt_mixture(mix: &GaussianMixture) -> String {
    mix.components()
        .iter()
        .map(|c| {
            let cov = if c.covariance.nrows() == 1 {
                format!("{}", c.covariance[(0, 0)])
            } else {
                fmt_matrix(&c.covariance)
            };
            format!("{} N(0, {cov})", c.weight)
        })
        .collect::<Vec<_>>()
        .join(" + ")
}

/// Fully resolved run settings; the manifest echoes these and can be fed back
/// through `--config` to replay a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub problem: Problem,
    pub deltas: Vec<f64>,
    pub runs: usize,
    pub steps: usize,
    pub seed: u64,
    pub filters: Vec<FilterKind>,
    pub params: FilterParams,
    pub max_halvings: u32,
    pub risk_margin: f64,
    pub window: usize,
}

impl Settings {
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let p = &self.params;
        let grid = p.grid.values();
        vec![
            ("problem", self.problem.name().to_string()),
            (
                "delta",
                self.deltas
                    .iter()
                    .map(|d| fmt_f64(*d))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("runs", self.runs.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            (
                "filters",
                self.filters
                    .iter()
                    .map(|f| f.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("sigma", fmt_f64(p.sigma)),
            (
                "grid",
                format!(
                    "{},{},{}",
                    fmt_f64(grid[0]),
                    fmt_f64(grid[grid.len() - 1]),
                    grid.len()
                ),
            ),
            ("sigma_c", fmt_f64(p.grid.sigma_c())),
            ("mu1", fmt_f64(p.mu1)),
            ("mu2", fmt_f64(p.mu2)),
            ("epsilon", fmt_f64(p.epsilon)),
            ("t_max", p.t_max.to_string()),
            ("max_halvings", self.max_halvings.to_string()),
            ("risk_margin", fmt_f64(self.risk_margin)),
            ("window", self.window.to_string()),
        ]
    }
}

/// Partial settings as read from a config file or the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub problem: Option<Problem>,
    pub deltas: Option<Vec<f64>>,
    pub runs: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub filters: Option<Vec<FilterKind>>,
    pub sigma: Option<f64>,
    pub grid: Option<(f64, f64, usize)>,
    pub sigma_c: Option<f64>,
    pub mu1: Option<f64>,
    pub mu2: Option<f64>,
    pub epsilon: Option<f64>,
    pub t_max: Option<usize>,
    pub max_halvings: Option<u32>,
    pub risk_margin: Option<f64>,
    pub window: Option<usize>,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, BenchError> {
    value
        .trim()
        .parse()
        .map_err(|_| config_error(key, format!("cannot parse '{}'", value.trim())))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, BenchError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v)).collect()
}

impl Overrides {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), BenchError> {
        match key {
            "problem" => self.problem = Some(value.parse()?),
            "delta" => self.deltas = Some(parse_list(key, value)?),
            "runs" => self.runs = Some(parse_value(key, value)?),
            "steps" => self.steps = Some(parse_value(key, value)?),
            "seed" => self.seed = Some(parse_value(key, value)?),
            "filters" => {
                self.filters = Some(
                    value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(str::parse)
                        .collect::<Result<_, _>>()?,
                )
            }
            "sigma" => self.sigma = Some(parse_value(key, value)?),
            "grid" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 3 {
                    return Err(config_error(key, "expected lo,hi,count"));
                }
                self.grid = Some((
                    parse_value(key, parts[0])?,
                    parse_value(key, parts[1])?,
                    parse_value(key, parts[2])?,
                ));
            }
            "sigma_c" => self.sigma_c = Some(parse_value(key, value)?),
            "mu1" => self.mu1 = Some(parse_value(key, value)?),
            "mu2" => self.mu2 = Some(parse_value(key, value)?),
            "epsilon" => self.epsilon = Some(parse_value(key, value)?),
            "t_max" => self.t_max = Some(parse_value(key, value)?),
            "max_halvings" => self.max_halvings = Some(parse_value(key, value)?),
            "risk_margin" => self.risk_margin = Some(parse_value(key, value)?),
            "window" => self.window = Some(parse_value(key, value)?),
            _ => return Err(config_error(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses `key=value` lines. Blank lines, `#` comments and keys starting
    /// with `result.` (manifest output) are skipped.
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let mut out = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_error(line, "expected key=value"))?;
            let key = key.trim();
            if key.starts_with("result.") {
                continue;
            }
            out.set(key, value.trim())?;
        }
        Ok(out)
    }

    /// `other` wins wherever it is set.
    pub fn merge(self, other: Overrides) -> Overrides {
        Overrides {
            problem: other.problem.or(self.problem),
            deltas: other.deltas.or(self.deltas),
            runs: other.runs.or(self.runs),
            steps: other.steps.or(self.steps),
            seed: other.seed.or(self.seed),
            filters: other.filters.or(self.filters),
            sigma: other.sigma.or(self.sigma),
            grid: other.grid.or(self.grid),
            sigma_c: other.sigma_c.or(self.sigma_c),
            mu1: other.mu1.or(self.mu1),
            mu2: other.mu2.or(self.mu2),
            epsilon: other.epsilon.or(self.epsilon),
            t_max: other.t_max.or(self.t_max),
            max_halvings: other.max_halvings.or(self.max_halvings),
            risk_margin: other.risk_margin.or(self.risk_margin),
            window: other.window.or(self.window),
        }
    }

    pub fn resolve(&self, problem: Problem) -> Result<Settings, BenchError> {
        let (lo, hi, count) =
            self.grid
                .unwrap_or((DEFAULT_GRID_MIN, DEFAULT_GRID_MAX, DEFAULT_GRID_COUNT));
        let grid =
            BandwidthGrid::log_spaced(lo, hi, count, self.sigma_c.unwrap_or(DEFAULT_SIGMA_C))?;
        let filters = self
            .filters
            .clone()
            .unwrap_or_else(|| FilterKind::ALL.to_vec());
        Ok(Settings {
            problem,
            deltas: self
                .deltas
                .clone()
                .unwrap_or_else(|| problem.default_deltas()),
            runs: self.runs.unwrap_or(DEFAULT_RUNS),
            steps: self.steps.unwrap_or(problem.default_steps()),
            seed: self.seed.unwrap_or(DEFAULT_SEED),
            filters,
            params: FilterParams {
                mu1: self.mu1.unwrap_or(DEFAULT_MU1),
                mu2: self.mu2.unwrap_or(DEFAULT_MU2),
                sigma: self.sigma.unwrap_or(DEFAULT_FIXED_SIGMA),
                grid,
                epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
                t_max: self.t_max.unwrap_or(DEFAULT_T_MAX),
            },
            max_halvings: self.max_halvings.unwrap_or(DEFAULT_MAX_HALVINGS),
            risk_margin: self.risk_margin.unwrap_or(DEFAULT_RISK_MARGIN),
            window: self.window.unwrap_or(DEFAULT_WINDOW),
        })
    }
}

/// Builds one of the two benchmark problems with `overrides` applied.
pub fn builtin_problem(name: &str, overrides: &Overrides) -> Result<Experiment, BenchError> {
    let problem: Problem = name.parse()?;
    let settings = overrides.resolve(problem)?;
    let (model, perturbation, x0, p0, state_names, table_groups) = match problem {
        Problem::Problem1 => {
            let model = UncertainLinearModel::new(
                DMatrix::from_row_slice(2, 2, &[0.99, 0.01, 0.0, 0.99]),
                DMatrix::zeros(2, 2),
                DMatrix::from_row_slice(2, 1, &[5.0, 1.0]),
                DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
                GaussianMixture::scalar(&[(0.8, 0.01), (0.2, 1.0)])?,
                GaussianMixture::scalar(&[(0.8, 1.0), (0.2, 1000.0)])?,
            )?;
            (
                model,
                Perturbation::Coupling,
                DVector::from_vec(vec![10.0, 20.0]),
                DMatrix::from_diagonal(&DVector::from_vec(vec![35.0 * 35.0, 70.0 * 70.0])),
                vec!["x1".to_string(), "x2".to_string()],
                vec![StateGroup::new("x2", &[1])],
            )
        }
        Problem::Problem2 => {
            let t = 0.1;
            let q1 = GaussianMixture::scalar(&[(0.9, 0.0005), (0.1, 0.05)])?;
            let model = UncertainLinearModel::new(
                DMatrix::from_row_slice(3, 3, &[1.0, t, 0.5 * t * t, 0.0, 1.0, t, 0.0, 0.0, 1.0]),
                DMatrix::zeros(3, 3),
                DMatrix::identity(3, 3),
                DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]),
                GaussianMixture::independent(&[q1.clone(), q1.clone(), q1])?,
                GaussianMixture::scalar(&[(0.8, 0.005), (0.2, 50.0)])?,
            )?;
            (
                model,
                Perturbation::ConstantAcceleration { t },
                DVector::from_vec(vec![50.0, 4.0, 1.0]),
                DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.25, 0.01])),
                vec![
                    "position".to_string(),
                    "velocity".to_string(),
                    "acceleration".to_string(),
                ],
                vec![
                    StateGroup::new("position", &[0]),
                    StateGroup::new("velocity", &[1]),
                ],
            )
        }
    };
    let filters = settings
        .filters
        .iter()
        .map(|k| FilterSpec {
            name: k.name().to_string(),
            config: k.config(&settings.params),
        })
        .collect();
    let exp = Experiment {
        name: problem.name().to_string(),
        model,
        perturbation,
        x0,
        p0,
        steps: settings.steps,
        runs: settings.runs,
        filters,
        delta_sweep: settings.deltas.clone(),
        seed: settings.seed,
        state_names,
        table_groups,
        halving: HalvingPolicy {
            max_halvings: settings.max_halvings,
            margin: settings.risk_margin,
        },
        window: settings.window,
        record_selection: false,
        settings,
    };
    exp.validate()?;
    Ok(exp)
}

/// Per-step scores of one selected-bandwidth update.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord {
    pub run: usize,
    pub step: usize,
    pub sigma: f64,
    /// `(sigma, jkb)`; `None` for candidates whose update failed.
    pub candidates: Vec<(f64, Option<f64>)>,
}

impl SelectionRecord {
    /// Whether `sigma` is the argmax of the scores, ties going to the
    /// largest bandwidth.
    pub fn is_optimal(&self) -> bool {
        expected_choice(&self.candidates) == Some(self.sigma)
    }
}

fn expected_choice(candidates: &[(f64, Option<f64>)]) -> Option<f64> {
    let best = candidates
        .iter()
        .filter_map(|c| c.1)
        .fold(f64::NEG_INFINITY, f64::max);
    candidates
        .iter()
        .filter(|c| c.1 == Some(best))
        .map(|c| c.0)
        .fold(None, |acc: Option<f64>, s| {
            Some(acc.map_or(s, |a| a.max(s)))
        })
}

/// Counters gathered while running one filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStats {
    pub steps: usize,
    pub halvings: u64,
    /// Steps that neither passed the positivity audit nor recorded a halving.
    pub risk_audit_failures: usize,
    /// Posterior covariances that were asymmetric or had an eigenvalue
    /// below [`COVARIANCE_FLOOR`].
    pub covariance_violations: usize,
    pub min_covariance_eigenvalue: f64,
    pub selection_violations: usize,
    pub failed_candidates: u64,
    pub iterations: u64,
    pub max_iterations: usize,
}

impl Default for FilterStats {
    fn default() -> Self {
        Self {
            steps: 0,
            halvings: 0,
            risk_audit_failures: 0,
            covariance_violations: 0,
            min_covariance_eigenvalue: f64::INFINITY,
            selection_violations: 0,
            failed_candidates: 0,
            iterations: 0,
            max_iterations: 0,
        }
    }
}

impl FilterStats {
    fn merge(&mut self, o: &FilterStats) {
        self.steps += o.steps;
        self.halvings += o.halvings;
        self.risk_audit_failures += o.risk_audit_failures;
        self.covariance_violations += o.covariance_violations;
        self.min_covariance_eigenvalue = self
            .min_covariance_eigenvalue
            .min(o.min_covariance_eigenvalue);
        self.selection_violations += o.selection_violations;
        self.failed_candidates += o.failed_candidates;
        self.iterations += o.iterations;
        self.max_iterations = self.max_iterations.max(o.max_iterations);
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.iterations as f64 / self.steps as f64
        }
    }
}

/// A run excluded from the statistics because one filter failed in it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub run: usize,
    pub filter: String,
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSummary {
    pub filter: String,
    /// `rmse[state][k]` for steps `k = 1..=K`.
    pub rmse: Vec<Vec<f64>>,
    /// Per valid run: `(run, time-averaged squared error per state)`.
    pub run_mse: Vec<(usize, Vec<f64>)>,
    pub stats: FilterStats,
    /// Selected bandwidths per valid run (empty unless the filter selects).
    pub sigma: Vec<(usize, Vec<f64>)>,
    pub selection_records: Vec<SelectionRecord>,
}

impl FilterSummary {
    /// Time-averaged `sqrt(sum_{j in states} MSE_j)`.
    pub fn avg_rmse(&self, states: &[usize]) -> f64 {
        let steps = self.rmse[0].len();
        let total: f64 = (0..steps)
            .map(|k| {
                states
                    .iter()
                    .map(|&j| self.rmse[j][k] * self.rmse[j][k])
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total / steps as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepDiagnostics {
    /// `Ok(radius)` of the perturbation stability test, or the error text.
    pub stability_radius: Result<f64, String>,
    pub observability_bounds: Option<(f64, f64)>,
    pub controllability_bounds: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub delta: f64,
    pub valid_runs: usize,
    pub failures: Vec<RunFailure>,
    pub filters: Vec<FilterSummary>,
    pub diagnostics: SweepDiagnostics,
}

impl SweepResult {
    pub fn filter(&self, name: &str) -> Option<&FilterSummary> {
        self.filters.iter().find(|f| f.filter == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub delta: f64,
    pub filter: String,
    pub group: String,
    pub avg_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub name: String,
    pub seed: u64,
    pub runs: usize,
    pub steps: usize,
    pub state_names: Vec<String>,
    pub settings: Settings,
    pub sweeps: Vec<SweepResult>,
    pub table: Vec<TableRow>,
}

impl BenchReport {
    pub fn avg_rmse(&self, delta: f64, filter: &str, group: &str) -> Option<f64> {
        self.table
            .iter()
            .find(|r| r.delta == delta && r.filter == filter && r.group == group)
            .map(|r| r.avg_rmse)
    }
}

struct FilterTrace {
    /// Squared errors, `steps x n` row-major by step.
    sq_err: Vec<f64>,
    sigma: Vec<f64>,
    records: Vec<SelectionRecord>,
    stats: FilterStats,
    failure: Option<(usize, String)>,
}

struct RunResult {
    traces: Vec<FilterTrace>,
}

fn draw_initial<R: Rng + ?Sized>(
    x0: &DVector<f64>,
    chol: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_iterator(
        x0.len(),
        (0..x0.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    x0 + chol * z
}

fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(p.clone()).eigenvalues.min()
}

fn run_filter(
    spec: &FilterSpec,
    exp: &Experiment,
    nominal: &crate::system::NominalModel,
    truth: &crate::system::Trajectory,
    run: usize,
) -> FilterTrace {
    let n = exp.x0.len();
    let mut trace = FilterTrace {
        sq_err: Vec::with_capacity(exp.steps * n),
        sigma: Vec::new(),
        records: Vec::new(),
        stats: FilterStats::default(),
        failure: None,
    };
    let m = nominal.h.nrows();
    let mut state = match FilterState::new(exp.x0.clone(), exp.p0.clone(), m) {
        Ok(s) => s,
        Err(e) => {
            trace.failure = Some((0, e.to_string()));
            return trace;
        }
    };
    for (idx, y) in truth.measurements.iter().enumerate() {
        let out = match step_with_halving(&state, y, nominal, &spec.config, &exp.halving) {
            Ok(out) => out,
            Err(e) => {
                trace.failure = Some((e.k, e.to_string()));
                return trace;
            }
        };
        let st = &mut trace.stats;
        st.steps += 1;
        st.halvings += u64::from(out.halvings);
        st.iterations += out.iterations as u64;
        st.max_iterations = st.max_iterations.max(out.iterations);
        if out.halvings == 0 && !risk_positive(&state.cov, out.mu1_used) {
            st.risk_audit_failures += 1;
        }
        let min_eig = min_eigenvalue(&out.state.cov);
        st.min_covariance_eigenvalue = st.min_covariance_eigenvalue.min(min_eig);
        if !(min_eig > COVARIANCE_FLOOR) || out.state.cov != out.state.cov.transpose() {
            st.covariance_violations += 1;
        }
        if let Some(sel) = &out.selection {
            st.failed_candidates += sel.failed as u64;
            let candidates: Vec<(f64, Option<f64>)> =
                sel.candidates.iter().map(|c| (c.sigma, c.jkb)).collect();
            let record = SelectionRecord {
                run,
                step: idx + 1,
                sigma: sel.sigma,
                candidates,
            };
            if !record.is_optimal() {
                st.selection_violations += 1;
            }
            trace.sigma.push(sel.sigma);
            if exp.record_selection {
                trace.records.push(record);
            }
        }
        let err = &truth.states[idx + 1] - &out.state.mean;
        trace.sq_err.extend(err.iter().map(|e| e * e));
        state = out.state;
    }
    trace
}

fn run_once(
    exp: &Experiment,
    model: &UncertainLinearModel,
    p0_chol: &DMatrix<f64>,
    run: usize,
) -> Result<RunResult, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(exp.seed ^ run as u64);
    let truth_x0 = draw_initial(&exp.x0, p0_chol, &mut rng);
    let truth = simulate(model, &truth_x0, exp.steps, &mut rng)?;
    let nominal = model.nominal();
    let traces = exp
        .filters
        .iter()
        .map(|spec| run_filter(spec, exp, &nominal, &truth, run))
        .collect();
    Ok(RunResult { traces })
}

fn sweep_diagnostics(exp: &Experiment, model: &UncertainLinearModel) -> SweepDiagnostics {
    let r = model.measurement_covariance();
    let q = model.process_covariance();
    let l = exp.window;
    let gram = grammians(model, &r, &q, l, l).ok();
    SweepDiagnostics {
        stability_radius: stability_condition(model, &r, l, l)
            .map(|s| s.spectral_radius)
            .map_err(|e| e.to_string()),
        observability_bounds: gram.as_ref().map(|g| g.observability_bounds),
        controllability_bounds: gram.as_ref().map(|g| g.controllability_bounds),
    }
}

fn run_sweep(exp: &Experiment, delta: f64) -> Result<SweepResult, BenchError> {
    let model = exp.model_at(delta)?;
    let p0_chol = cholesky_lower(&exp.p0)
        .ok_or_else(|| BenchError::InvalidExperiment("P0 is not PD".into()))?;
    let results: Vec<RunResult> = (0..exp.runs)
        .into_par_iter()
        .map(|run| run_once(exp, &model, &p0_chol, run))
        .collect::<Result<_, _>>()?;

    let n = exp.x0.len();
    let k_steps = exp.steps;
    let mut sums = vec![vec![0.0; k_steps * n]; exp.filters.len()];
    let mut summaries: Vec<FilterSummary> = exp
        .filters
        .iter()
        .map(|f| FilterSummary {
            filter: f.name.clone(),
            rmse: Vec::new(),
            run_mse: Vec::new(),
            stats: FilterStats::default(),
            sigma: Vec::new(),
            selection_records: Vec::new(),
        })
        .collect();
    let mut failures = Vec::new();
    let mut valid = 0usize;
    for (run, result) in results.into_iter().enumerate() {
        let failure = result
            .traces
            .iter()
            .zip(&exp.filters)
            .find_map(|(t, spec)| {
                t.failure.as_ref().map(|(step, message)| RunFailure {
                    run,
                    filter: spec.name.clone(),
                    step: *step,
                    message: message.clone(),
                })
            });
        for (summary, trace) in summaries.iter_mut().zip(&result.traces) {
            summary.stats.merge(&trace.stats);
        }
        if let Some(f) = failure {
            failures.push(f);
            continue;
        }
        valid += 1;
        for ((summary, trace), sum) in summaries.iter_mut().zip(result.traces).zip(sums.iter_mut())
        {
            for (acc, e) in sum.iter_mut().zip(&trace.sq_err) {
                *acc += e;
            }
            let mse = (0..n)
                .map(|j| {
                    (0..k_steps).map(|k| trace.sq_err[k * n + j]).sum::<f64>() / k_steps as f64
                })
                .collect();
            summary.run_mse.push((run, mse));
            if !trace.sigma.is_empty() {
                summary.sigma.push((run, trace.sigma));
            }
            summary.selection_records.extend(trace.records);
        }
    }
    if valid == 0 {
        return Err(BenchError::AllRunsFailed { delta });
    }
    for (summary, sum) in summaries.iter_mut().zip(&sums) {
        summary.rmse = (0..n)
            .map(|j| {
                (0..k_steps)
                    .map(|k| (sum[k * n + j] / valid as f64).sqrt())
                    .collect()
            })
            .collect();
    }
    Ok(SweepResult {
        delta,
        valid_runs: valid,
        failures,
        filters: summaries,
        diagnostics: sweep_diagnostics(exp, &model),
    })
}

/// Runs every sweep value through the paired Monte Carlo protocol.
pub fn run_experiment(exp: &Experiment) -> Result<BenchReport, BenchError> {
    exp.validate()?;
    let sweeps = exp
        .delta_sweep
        .iter()
        .map(|&d| run_sweep(exp, d))
        .collect::<Result<Vec<_>, _>>()?;
    let mut table = Vec::new();
    for sweep in &sweeps {
        for summary in &sweep.filters {
            for group in &exp.table_groups {
                table.push(TableRow {
                    delta: sweep.delta,
                    filter: summary.filter.clone(),
                    group: group.name.clone(),
                    avg_rmse: summary.avg_rmse(&group.states),
                });
            }
        }
    }
    Ok(BenchReport {
        name: exp.name.clone(),
        seed: exp.seed,
        runs: exp.runs,
        steps: exp.steps,
        state_names: exp.state_names.clone(),
        settings: exp.settings.clone(),
        sweeps,
        table,
    })
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, BenchError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| BenchError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn rmse_csv(report: &BenchReport) -> String {
    let mut s = String::from("delta,step,filter,state,rmse\n");
    for sweep in &report.sweeps {
        let d = fmt_f64(sweep.delta);
        for k in 0..report.steps {
            for f in &sweep.filters {
                for (j, name) in report.state_names.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "{d},{},{},{name},{}",
                        k + 1,
                        f.filter,
                        fmt_f64(f.rmse[j][k])
                    );
                }
            }
        }
    }
    s
}

pub fn table_csv(report: &BenchReport) -> String {
    let mut s = String::from("delta,filter,avg_rmse,state_group\n");
    for row in &report.table {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            fmt_f64(row.delta),
            row.filter,
            fmt_f64(row.avg_rmse),
            row.group
        );
    }
    s
}

pub fn sigma_csv(report: &BenchReport) -> String {
    let mut s = String::from("delta,filter,step,run,sigma\n");
    for sweep in &report.sweeps {
        let d = fmt_f64(sweep.delta);
        for f in &sweep.filters {
            for (run, series) in &f.sigma {
                for (k, sigma) in series.iter().enumerate() {
                    let _ = writeln!(s, "{d},{},{},{run},{}", f.filter, k + 1, fmt_f64(*sigma));
                }
            }
        }
    }
    s
}

fn fmt_bounds(b: Option<(f64, f64)>) -> String {
    b.map_or_else(
        || "unavailable".to_string(),
        |(lo, hi)| format!("{},{}", fmt_f64(lo), fmt_f64(hi)),
    )
}

pub fn manifest(report: &BenchReport) -> String {
    let mut s =
        String::from("# benchmark manifest; replay with `bench run --config <this file>`\n");
    for (key, value) in report.settings.to_pairs() {
        let _ = writeln!(s, "{key}={value}");
    }
    let _ = writeln!(s, "result.rmse_definition=per-step sqrt(mean over valid runs of squared error), time-averaged over steps 1..K");
    let _ = writeln!(s, "result.stability_reading=spectral radius of O^-1 dO < 1, first-order dO over a window of {}", report.settings.window);
    for sweep in &report.sweeps {
        let p = format!("result.delta[{}]", fmt_f64(sweep.delta));
        let _ = writeln!(s, "{p}.valid_runs={}", sweep.valid_runs);
        let _ = writeln!(s, "{p}.failed_runs={}", sweep.failures.len());
        for f in &sweep.failures {
            let _ = writeln!(
                s,
                "{p}.failure[{}]={} at step {}: {}",
                f.run, f.filter, f.step, f.message
            );
        }
        let dg = &sweep.diagnostics;
        match &dg.stability_radius {
            Ok(r) => {
                let _ = writeln!(s, "{p}.stability_radius={}", fmt_f64(*r));
                let _ = writeln!(s, "{p}.stability_holds={}", *r < 1.0);
            }
            Err(e) => {
                let _ = writeln!(s, "{p}.stability_radius=unavailable ({e})");
            }
        }
        let _ = writeln!(
            s,
            "{p}.observability_eig={}",
            fmt_bounds(dg.observability_bounds)
        );
        let _ = writeln!(
            s,
            "{p}.controllability_eig={}",
            fmt_bounds(dg.controllability_bounds)
        );
        for f in &sweep.filters {
            let q = format!("{p}.{}", f.filter);
            let st = &f.stats;
            let _ = writeln!(s, "{q}.steps={}", st.steps);
            let _ = writeln!(s, "{q}.halvings={}", st.halvings);
            let _ = writeln!(s, "{q}.risk_audit_failures={}", st.risk_audit_failures);
            let _ = writeln!(s, "{q}.covariance_violations={}", st.covariance_violations);
            let _ = writeln!(
                s,
                "{q}.min_covariance_eigenvalue={}",
                fmt_f64(st.min_covariance_eigenvalue)
            );
            let _ = writeln!(s, "{q}.selection_violations={}", st.selection_violations);
            let _ = writeln!(s, "{q}.failed_candidates={}", st.failed_candidates);
            let _ = writeln!(s, "{q}.mean_iterations={}", fmt_f64(st.mean_iterations()));
            let _ = writeln!(s, "{q}.max_iterations={}", st.max_iterations);
        }
    }
    s
}

/// Writes `rmse.csv`, `table.csv`, `sigma.csv` and `manifest.txt`.
pub fn write_report(report: &BenchReport, out_dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    fs::create_dir_all(out_dir).map_err(|source| BenchError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    Ok(vec![
        write_file(out_dir, "rmse.csv", &rmse_csv(report))?,
        write_file(out_dir, "table.csv", &table_csv(report))?,
        write_file(out_dir, "sigma.csv", &sigma_csv(report))?,
        write_file(out_dir, "manifest.txt", &manifest(report))?,
    ])
}

/// Table rows keyed by `(delta bits, filter, group)`, handy for lookups.
pub fn table_index(report: &BenchReport) -> BTreeMap<(u64, String, String), f64> {
    report
        .table
        .iter()
        .map(|r| {
            (
                (r.delta.to_bits(), r.filter.clone(), r.group.clone()),
                r.avg_rmse,
            )
        })
        .collect()
}
