//! Run configuration: a flat `key = value` file with `#` comments.
//!
//! ```text
//! L = 1
//! lambda = 1
//! n = 101
//! initial_condition = gauss_bump
//! ```
//!
//! Unset keys take defaults: `dt = h`, `T = 10 / lambda` (10 when
//! `lambda = 0`), `epsilon = lambda / 2`, `kernel_tol = 1e-6`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::DEFAULT_KERNEL_TOL;
use crate::mesh::IntervalGrid;
use crate::transforms::Field;

/// Named initial profile for the plant state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialCondition {
    /// `exp(-((x - c) / w)^2) * (x / L) * (1 - x / L)^2`, which vanishes at
    /// `x = 0` and to second order at `x = L`.
    GaussBump { center: f64, width: f64 },
    /// `((1 + cos(pi (x - c) / w)) / 2)^2` on `|x - c| < w`, zero elsewhere;
    /// three times continuously differentiable.
    RaisedCosine { center: f64, width: f64 },
    /// `1 - cos x` on `[0, 2 pi]`, a steady state of the uncontrolled plant.
    Stationary2Pi,
    /// Two-column `x,value` CSV, interpolated linearly onto the grid.
    CustomCsv { path: PathBuf },
}

impl InitialCondition {
    pub fn name(&self) -> &'static str {
        match self {
            InitialCondition::GaussBump { .. } => "gauss_bump",
            InitialCondition::RaisedCosine { .. } => "raised_cosine",
            InitialCondition::Stationary2Pi => "stationary_2pi",
            InitialCondition::CustomCsv { .. } => "custom_csv",
        }
    }

    /// Samples the profile on `grid`.
    pub fn sample(&self, grid: &IntervalGrid) -> Result<Field> {
        let length = grid.length();
        match self {
            InitialCondition::GaussBump { center, width } => Ok(Field::from_fn(grid, |x| {
                let s = x / length;
                (-((x - center) / width).powi(2)).exp() * s * (1.0 - s).powi(2)
            })),
            InitialCondition::RaisedCosine { center, width } => Ok(Field::from_fn(grid, |x| {
                let r = (x - center) / width;
                if r.abs() < 1.0 {
                    (0.5 * (1.0 + (PI * r).cos())).powi(2)
                } else {
                    0.0
                }
            })),
            InitialCondition::Stationary2Pi => Ok(Field::from_fn(grid, |x| 1.0 - x.cos())),
            InitialCondition::CustomCsv { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
                    key: "ic_csv".into(),
                    message: format!("cannot read {}: {e}", path.display()),
                })?;
                let table = parse_profile_csv(&text)?;
                Field::new(grid.clone(), grid.sample(|x| interpolate(&table, x)))
            }
        }
    }
}

fn parse_profile_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let bad = |message: String| Error::Config {
        key: "ic_csv".into(),
        message,
    };
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(bad(format!("line {}: expected two columns", lineno + 1)));
        };
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(x), Ok(v)) if x.is_finite() && v.is_finite() => rows.push((x, v)),
            // a header row is allowed
            _ if rows.is_empty() && a.parse::<f64>().is_err() => continue,
            _ => return Err(bad(format!("line {}: not a pair of numbers", lineno + 1))),
        }
    }
    if rows.len() < 2 {
        return Err(bad("need at least two rows".into()));
    }
    if rows.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(bad("x column must be strictly increasing".into()));
    }
    Ok(rows)
}

/// Piecewise-linear interpolation, constant beyond the table ends.
fn interpolate(table: &[(f64, f64)], x: f64) -> f64 {
    let k = table.partition_point(|&(xi, _)| xi <= x);
    if k == 0 {
        return table[0].1;
    }
    if k == table.len() {
        return table[k - 1].1;
    }
    let (x0, v0) = table[k - 1];
    let (x1, v1) = table[k];
    v0 + (v1 - v0) * (x - x0) / (x1 - x0)
}

/// Initial observer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObserverStart {
    Zero,
    /// Start the observer on the plant state (zero initial error).
    Plant,
}

/// Validated run parameters with defaults applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub length: f64,
    pub lambda: f64,
    pub n: usize,
    pub dt: f64,
    pub t_end: f64,
    pub epsilon: f64,
    pub kernel_tol: f64,
    pub initial_condition: InitialCondition,
    pub observer_start: ObserverStart,
    pub output_prefix: String,
    pub seed: u64,
    /// Lyapunov weight overrides; chosen automatically when absent.
    pub weight_a: Option<f64>,
    pub weight_b: Option<f64>,
    pub open_loop: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        ConfigBuilder::default()
            .build()
            .expect("default configuration is valid")
    }
}

impl SimConfig {
    pub fn grid(&self) -> Result<IntervalGrid> {
        IntervalGrid::new(self.length, self.n)
    }

    /// Number of time steps, `floor(T / dt)`.
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt * (1.0 + 1e-12)).floor() as usize
    }

    /// Rebuilds the configuration with a different decay rate, re-deriving
    /// every default that depends on it.
    pub fn with_lambda(&self, lambda: f64) -> Result<SimConfig> {
        let mut b = self.builder();
        b.lambda = Some(lambda);
        if self.t_end == default_horizon(self.lambda) {
            b.t_end = None;
        }
        if self.epsilon == 0.5 * self.lambda {
            b.epsilon = None;
        }
        b.build()
    }

    /// Rebuilds the configuration on a different grid; `dt` follows the new
    /// spacing unless it was set explicitly to something other than `h`.
    pub fn with_grid(&self, n: usize) -> Result<SimConfig> {
        let mut b = self.builder();
        b.n = Some(n);
        if self.dt == self.length / (self.n - 1) as f64 {
            b.dt = None;
        }
        b.build()
    }

    fn builder(&self) -> ConfigBuilder {
        ConfigBuilder {
            length: Some(self.length),
            lambda: Some(self.lambda),
            n: Some(self.n),
            dt: Some(self.dt),
            t_end: Some(self.t_end),
            epsilon: Some(self.epsilon),
            kernel_tol: Some(self.kernel_tol),
            initial_condition: Some(self.initial_condition.clone()),
            observer_start: Some(self.observer_start),
            output_prefix: Some(self.output_prefix.clone()),
            seed: Some(self.seed),
            weight_a: self.weight_a,
            weight_b: self.weight_b,
            open_loop: Some(self.open_loop),
        }
    }
}

fn default_horizon(lambda: f64) -> f64 {
    if lambda > 0.0 {
        10.0 / lambda
    } else {
        10.0
    }
}

/// Partially specified configuration; [`ConfigBuilder::build`] applies the
/// defaults and checks the invariants.
#[derive(Debug, Clone, Default)]
pub struct ConfigBuilder {
    pub length: Option<f64>,
    pub lambda: Option<f64>,
    pub n: Option<usize>,
    pub dt: Option<f64>,
    pub t_end: Option<f64>,
    pub epsilon: Option<f64>,
    pub kernel_tol: Option<f64>,
    pub initial_condition: Option<InitialCondition>,
    pub observer_start: Option<ObserverStart>,
    pub output_prefix: Option<String>,
    pub seed: Option<u64>,
    pub weight_a: Option<f64>,
    pub weight_b: Option<f64>,
    pub open_loop: Option<bool>,
}

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl ConfigBuilder {
    pub fn build(self) -> Result<SimConfig> {
        let length = self.length.unwrap_or(1.0);
        if !(length.is_finite() && length > 0.0) {
            return Err(config_error("L", "must be a positive number"));
        }
        let lambda = self.lambda.unwrap_or(1.0);
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(config_error("lambda", "must be a non-negative number"));
        }
        let n = self.n.unwrap_or(101);
        if n < 21 {
            return Err(config_error("n", "must be at least 21"));
        }
        let h = length / (n - 1) as f64;
        let dt = self.dt.unwrap_or(h);
        if !(dt.is_finite() && dt > 0.0) {
            return Err(config_error("dt", "must be positive"));
        }
        let t_end = self.t_end.unwrap_or_else(|| default_horizon(lambda));
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(config_error("T", "must be positive"));
        }
        let epsilon = self.epsilon.unwrap_or(0.5 * lambda);
        if !epsilon.is_finite() || epsilon < 0.0 || (lambda > 0.0 && !(epsilon > 0.0 && epsilon < lambda)) {
            return Err(config_error("epsilon", "must lie strictly between 0 and lambda"));
        }
        let kernel_tol = self.kernel_tol.unwrap_or(DEFAULT_KERNEL_TOL);
        if !(kernel_tol.is_finite() && kernel_tol > 0.0) {
            return Err(config_error("kernel_tol", "must be positive"));
        }
        let initial_condition = self.initial_condition.unwrap_or(InitialCondition::GaussBump {
            center: 0.4 * length,
            width: 0.08 * length,
        });
        match &initial_condition {
            InitialCondition::Stationary2Pi if (length - 2.0 * PI).abs() > 1e-9 * 2.0 * PI => {
                return Err(config_error("L", "stationary_2pi requires L = 2 pi"));
            }
            InitialCondition::GaussBump { width, .. } | InitialCondition::RaisedCosine { width, .. }
                if !(width.is_finite() && *width > 0.0) =>
            {
                return Err(config_error("ic_width", "must be positive"));
            }
            InitialCondition::GaussBump { center, .. } | InitialCondition::RaisedCosine { center, .. }
                if !center.is_finite() =>
            {
                return Err(config_error("ic_center", "must be a number"));
            }
            _ => {}
        }
        for (key, w) in [("A", self.weight_a), ("B", self.weight_b)] {
            if let Some(w) = w {
                if !(w.is_finite() && w > 0.0) {
                    return Err(config_error(key, "must be positive"));
                }
            }
        }
        Ok(SimConfig {
            length,
            lambda,
            n,
            dt,
            t_end,
            epsilon,
            kernel_tol,
            initial_condition,
            observer_start: self.observer_start.unwrap_or(ObserverStart::Zero),
            output_prefix: self.output_prefix.unwrap_or_else(|| "out/run".into()),
            seed: self.seed.unwrap_or(0),
            weight_a: self.weight_a,
            weight_b: self.weight_b,
            open_loop: self.open_loop.unwrap_or(false),
        })
    }
}

const KEYS: &[&str] = &[
    "L",
    "lambda",
    "n",
    "dt",
    "T",
    "epsilon",
    "kernel_tol",
    "initial_condition",
    "ic_center",
    "ic_width",
    "ic_csv",
    "observer_start",
    "output_prefix",
    "seed",
    "A",
    "B",
    "open_loop",
];

fn real(key: &str, raw: &str) -> Result<f64> {
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| config_error(key, format!("expected a number, got `{raw}`")))
}

/// Parses `key = value` lines. Relative `ic_csv` paths resolve against
/// `base_dir` when given.
pub fn parse_config_in(text: &str, base_dir: Option<&Path>) -> Result<SimConfig> {
    let mut entries: BTreeMap<&str, &str> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(config_error(
                line,
                format!("line {}: expected `key = value`", lineno + 1),
            ));
        };
        let key = key.trim();
        let value = value.trim();
        if !KEYS.contains(&key) {
            return Err(config_error(key, "unknown key"));
        }
        if entries.insert(key, value).is_some() {
            return Err(config_error(key, "set more than once"));
        }
    }

    let get_real = |key: &str| entries.get(key).map(|raw| real(key, raw)).transpose();
    let mut b = ConfigBuilder {
        length: get_real("L")?,
        lambda: get_real("lambda")?,
        dt: get_real("dt")?,
        t_end: get_real("T")?,
        epsilon: get_real("epsilon")?,
        kernel_tol: get_real("kernel_tol")?,
        weight_a: get_real("A")?,
        weight_b: get_real("B")?,
        ..ConfigBuilder::default()
    };
    if let Some(raw) = entries.get("n") {
        b.n = Some(
            raw.parse::<usize>()
                .map_err(|_| config_error("n", format!("expected a node count, got `{raw}`")))?,
        );
    }
    if let Some(raw) = entries.get("seed") {
        b.seed = Some(
            raw.parse::<u64>()
                .map_err(|_| config_error("seed", format!("expected an integer, got `{raw}`")))?,
        );
    }
    if let Some(raw) = entries.get("open_loop") {
        b.open_loop = Some(
            raw.parse::<bool>()
                .map_err(|_| config_error("open_loop", format!("expected true or false, got `{raw}`")))?,
        );
    }
    if let Some(raw) = entries.get("observer_start") {
        b.observer_start = Some(match *raw {
            "zero" => ObserverStart::Zero,
            "plant" => ObserverStart::Plant,
            _ => return Err(config_error("observer_start", "expected `zero` or `plant`")),
        });
    }
    if let Some(raw) = entries.get("output_prefix") {
        if raw.is_empty() {
            return Err(config_error("output_prefix", "must not be empty"));
        }
        b.output_prefix = Some(raw.to_string());
    }

    let length = b.length.unwrap_or(1.0);
    let center = get_real("ic_center")?;
    let width = get_real("ic_width")?;
    let name = entries.get("initial_condition").copied().unwrap_or("gauss_bump");
    let uses_shape = matches!(name, "gauss_bump" | "raised_cosine");
    if !uses_shape && (center.is_some() || width.is_some()) {
        let key = if center.is_some() { "ic_center" } else { "ic_width" };
        return Err(config_error(key, format!("not used by {name}")));
    }
    if name != "custom_csv" && entries.contains_key("ic_csv") {
        return Err(config_error("ic_csv", format!("not used by {name}")));
    }
    b.initial_condition = Some(match name {
        "gauss_bump" => InitialCondition::GaussBump {
            center: center.unwrap_or(0.4 * length),
            width: width.unwrap_or(0.08 * length),
        },
        "raised_cosine" => InitialCondition::RaisedCosine {
            center: center.unwrap_or(0.4 * length),
            width: width.unwrap_or(0.2 * length),
        },
        "stationary_2pi" => InitialCondition::Stationary2Pi,
        "custom_csv" => {
            let raw = entries
                .get("ic_csv")
                .ok_or_else(|| config_error("ic_csv", "required by custom_csv"))?;
            let mut path = PathBuf::from(raw);
            if let (Some(dir), true) = (base_dir, path.is_relative()) {
                path = dir.join(path);
            }
            InitialCondition::CustomCsv { path }
        }
        other => {
            return Err(config_error(
                "initial_condition",
                format!("unknown profile `{other}`"),
            ))
        }
    });
    b.build()
}

pub fn parse_config(text: &str) -> Result<SimConfig> {
    parse_config_in(text, None)
}
