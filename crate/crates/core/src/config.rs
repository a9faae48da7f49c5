//! Experiment configuration in a flat `key = value` format.
//!
//! ```text
//! # comments start with '#'
//! pendulum.M = 0.05
//! cost.Qs = 2, 0.01
//! x0 = -pi, 0
//! mpc.dt_list = 0.03, 0.04, 0.05
//! mpc.n_iter_list = 1..8
//! ```
//!
//! Every key is optional; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::discretize::Backend;
use crate::dynamics::PendulumParams;
use crate::ilqr::{CostModel, DEFAULT_ALPHAS};
use crate::manifold::{MatchSettings, PicardSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("`{key}`: {msg} (got `{value}`)")]
    InvalidValue { key: String, value: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajoptSettings {
    pub dt_list: Vec<f64>,
    pub horizon_time: f64,
    pub n_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSettings {
    /// Grid of the sweep.
    pub dt_list: Vec<f64>,
    pub n_iter_list: Vec<usize>,
    /// Single run of the `mpc` command.
    pub dt: f64,
    pub n_iter: usize,
    pub horizon_time: f64,
    pub sim_time: f64,
    pub plant_substeps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Fixed RK4 substeps per control step on the controller side.
    pub integrator_substeps: usize,
    pub mu: f64,
    pub always_adopt: bool,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub seed_radius: f64,
    pub t_end: f64,
    pub grid_points: usize,
    /// Spacing of the exported reference grid.
    pub resample_step: f64,
    /// Where cached oracle trajectories live; defaults to the output directory.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub pendulum: PendulumParams,
    pub state_weight: Vec<f64>,
    pub input_weight: Vec<f64>,
    pub terminal_weight: Vec<f64>,
    pub x0: Vec<f64>,
    pub backends: Vec<Backend>,
    pub trajopt: TrajoptSettings,
    pub mpc: MpcSettings,
    pub solver: SolverConfig,
    pub oracle: OracleConfig,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dts = vec![0.01, 0.02, 0.03, 0.04, 0.05];
        Self {
            pendulum: PendulumParams::default(),
            state_weight: vec![2.0, 0.01],
            input_weight: vec![2.0],
            terminal_weight: vec![2.0, 0.01],
            x0: vec![-PI, 0.0],
            backends: Backend::ALL.to_vec(),
            trajopt: TrajoptSettings { dt_list: dts.clone(), horizon_time: 0.8, n_iter: 200 },
            mpc: MpcSettings {
                dt_list: dts,
                n_iter_list: (1..=8).collect(),
                dt: 0.02,
                n_iter: 5,
                horizon_time: 0.4,
                sim_time: 2.0,
                plant_substeps: 10,
            },
            solver: SolverConfig { integrator_substeps: 4, mu: 0.0, always_adopt: false, alphas: DEFAULT_ALPHAS.to_vec() },
            oracle: OracleConfig { seed_radius: 0.05, t_end: 6.0, grid_points: 2000, resample_step: 1e-3, cache_dir: None },
            workers: 1,
        }
    }
}

const KEYS: &[&str] = &[
    "pendulum.M",
    "pendulum.G",
    "pendulum.L",
    "pendulum.J",
    "cost.Qs",
    "cost.R",
    "cost.Qf",
    "x0",
    "backend_list",
    "trajopt.dt_list",
    "trajopt.horizon_time",
    "trajopt.n_iter",
    "mpc.dt_list",
    "mpc.n_iter_list",
    "mpc.dt",
    "mpc.n_iter",
    "mpc.horizon_time",
    "mpc.sim_time",
    "mpc.plant_substeps",
    "solver.integrator_substeps",
    "solver.mu",
    "solver.always_adopt",
    "solver.alphas",
    "oracle.seed_radius",
    "oracle.t_end",
    "oracle.grid_points",
    "oracle.resample_step",
    "oracle.cache_dir",
    "sweep.workers",
];

fn parse_scalar(key: &str, raw: &str) -> Result<f64, ConfigError> {
    let s = raw.trim();
    let (sign, body) = match s.strip_prefix('-') {
        Some(rest) => (-1.0, rest.trim()),
        None => (1.0, s),
    };
    let value = match body {
        "pi" => PI,
        _ => if let Some(num) = body.strip_suffix("pi").and_then(|b| b.strip_suffix('*')) {
            num.trim().parse::<f64>().map(|k| k * PI).ok()
        } else {
            body.parse::<f64>().ok()
        }
        .ok_or_else(|| invalid(key, raw, "not a number"))?,
    };
    let value = sign * value;
    if !value.is_finite() {
        return Err(invalid(key, raw, "must be finite"));
    }
    Ok(value)
}

fn invalid(key: &str, value: &str, msg: &str) -> ConfigError {
    ConfigError::InvalidValue { key: key.into(), value: value.into(), msg: msg.into() }
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<f64>, ConfigError> {
    let items: Vec<f64> = raw.split(',').map(|s| parse_scalar(key, s)).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(invalid(key, raw, "empty list"));
    }
    Ok(items)
}

fn parse_count(key: &str, raw: &str) -> Result<usize, ConfigError> {
    raw.trim().parse::<usize>().map_err(|_| invalid(key, raw, "not a nonnegative integer"))
}

/// Comma-separated integers; `a..b` expands to the inclusive range.
fn parse_count_list(key: &str, raw: &str) -> Result<Vec<usize>, ConfigError> {
    let mut out = Vec::new();
    for item in raw.split(',') {
        if let Some((a, b)) = item.split_once("..") {
            let (a, b) = (parse_count(key, a)?, parse_count(key, b)?);
            if a > b {
                return Err(invalid(key, raw, "empty range"));
            }
            out.extend(a..=b);
        } else {
            out.push(parse_count(key, item)?);
        }
    }
    Ok(out)
}

fn positive(key: &str, raw: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(key, raw, "must be positive"))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let content = line.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: line_no, msg: format!("expected `key = value`, got `{content}`") })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line: line_no, key: key.into() });
            }
            if value.is_empty() {
                return Err(ConfigError::Syntax { line: line_no, msg: format!("`{key}` has no value") });
            }
            if entries.insert(key.into(), (line_no, value.into())).is_some() {
                return Err(ConfigError::Duplicate { line: line_no, key: key.into() });
            }
        }

        let mut cfg = Self::default();
        let mut inertia = None;
        for (key, (_, raw)) in &entries {
            let k = key.as_str();
            let raw = raw.as_str();
            match k {
                "pendulum.M" => cfg.pendulum.mass = parse_scalar(k, raw)?,
                "pendulum.G" => cfg.pendulum.gravity = parse_scalar(k, raw)?,
                "pendulum.L" => cfg.pendulum.length = parse_scalar(k, raw)?,
                "pendulum.J" => inertia = Some(parse_scalar(k, raw)?),
                "cost.Qs" => cfg.state_weight = parse_list(k, raw)?,
                "cost.R" => cfg.input_weight = parse_list(k, raw)?,
                "cost.Qf" => cfg.terminal_weight = parse_list(k, raw)?,
                "x0" => cfg.x0 = parse_list(k, raw)?,
                "backend_list" => {
                    cfg.backends = raw
                        .split(',')
                        .map(|s| s.trim().parse::<Backend>().map_err(|e| invalid(k, raw, &e)))
                        .collect::<Result<_, _>>()?
                }
                "trajopt.dt_list" => cfg.trajopt.dt_list = parse_list(k, raw)?,
                "trajopt.horizon_time" => cfg.trajopt.horizon_time = positive(k, raw, parse_scalar(k, raw)?)?,
                "trajopt.n_iter" => cfg.trajopt.n_iter = parse_count(k, raw)?,
                "mpc.dt_list" => cfg.mpc.dt_list = parse_list(k, raw)?,
                "mpc.n_iter_list" => cfg.mpc.n_iter_list = parse_count_list(k, raw)?,
                "mpc.dt" => cfg.mpc.dt = positive(k, raw, parse_scalar(k, raw)?)?,
                "mpc.n_iter" => cfg.mpc.n_iter = parse_count(k, raw)?,
                "mpc.horizon_time" => cfg.mpc.horizon_time = positive(k, raw, parse_scalar(k, raw)?)?,
                "mpc.sim_time" => cfg.mpc.sim_time = parse_scalar(k, raw)?,
                "mpc.plant_substeps" => cfg.mpc.plant_substeps = parse_count(k, raw)?,
                "solver.integrator_substeps" => cfg.solver.integrator_substeps = parse_count(k, raw)?,
                "solver.mu" => cfg.solver.mu = parse_scalar(k, raw)?,
                "solver.always_adopt" => {
                    cfg.solver.always_adopt = raw.parse::<bool>().map_err(|_| invalid(k, raw, "expected true or false"))?
                }
                "solver.alphas" => cfg.solver.alphas = parse_list(k, raw)?,
                "oracle.seed_radius" => cfg.oracle.seed_radius = positive(k, raw, parse_scalar(k, raw)?)?,
                "oracle.t_end" => cfg.oracle.t_end = positive(k, raw, parse_scalar(k, raw)?)?,
                "oracle.grid_points" => cfg.oracle.grid_points = parse_count(k, raw)?,
                "oracle.resample_step" => cfg.oracle.resample_step = positive(k, raw, parse_scalar(k, raw)?)?,
                "oracle.cache_dir" => cfg.oracle.cache_dir = Some(PathBuf::from(raw)),
                "sweep.workers" => cfg.workers = parse_count(k, raw)?,
                _ => unreachable!("key list and match arms disagree on `{k}`"),
            }
        }
        let p = &mut cfg.pendulum;
        p.inertia = inertia.unwrap_or(p.mass * p.length * p.length / 3.0);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        self.pendulum.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.cost_model()?;
        if self.x0.len() != self.state_weight.len() {
            return bad(format!("x0 has {} entries, the model has {} states", self.x0.len(), self.state_weight.len()));
        }
        if self.state_weight.len() != 2 || self.input_weight.len() != 1 {
            return bad("the pendulum has 2 states and 1 input".into());
        }
        for (name, list) in [("trajopt.dt_list", &self.trajopt.dt_list), ("mpc.dt_list", &self.mpc.dt_list)] {
            if list.is_empty() || list.iter().any(|&dt| !(dt > 0.0)) {
                return bad(format!("{name} must be a nonempty list of positive timesteps"));
            }
        }
        if self.backends.is_empty() {
            return bad("backend_list is empty".into());
        }
        if self.mpc.n_iter_list.is_empty()
            || self.mpc.n_iter_list.contains(&0)
            || self.mpc.n_iter == 0
            || self.trajopt.n_iter == 0
        {
            return bad("iteration counts must be at least 1".into());
        }
        if self.mpc.plant_substeps == 0 || self.solver.integrator_substeps == 0 {
            return bad("substep counts must be at least 1".into());
        }
        if !(self.mpc.sim_time >= 0.0) {
            return bad("mpc.sim_time must be nonnegative".into());
        }
        if !(self.solver.mu >= 0.0) {
            return bad("solver.mu must be nonnegative".into());
        }
        if self.solver.alphas.is_empty() || self.solver.alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return bad("solver.alphas must lie in (0, 1]".into());
        }
        if self.oracle.grid_points < 2 {
            return bad("oracle.grid_points must be at least 2".into());
        }
        if self.workers == 0 {
            return bad("sweep.workers must be at least 1".into());
        }
        Ok(())
    }

    pub fn cost_model(&self) -> Result<CostModel, ConfigError> {
        CostModel::diagonal(&self.state_weight, &self.input_weight, &self.terminal_weight)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn match_settings(&self) -> MatchSettings {
        MatchSettings {
            picard: PicardSettings {
                t_end: self.oracle.t_end,
                grid_points: self.oracle.grid_points,
                ..PicardSettings::default()
            },
            seed_radius: self.oracle.seed_radius,
            ..MatchSettings::default()
        }
    }

    /// Restricts the run to a single backend.
    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backends = vec![backend];
        self
    }

    /// Canonical text of every resolved setting, one `key = value` per line.
    pub fn canonical(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        let ints = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let p = &self.pendulum;
        let lines = [
            format!("pendulum.M={:e}", p.mass),
            format!("pendulum.G={:e}", p.gravity),
            format!("pendulum.L={:e}", p.length),
            format!("pendulum.J={:e}", p.inertia),
            format!("cost.Qs={}", list(&self.state_weight)),
            format!("cost.R={}", list(&self.input_weight)),
            format!("cost.Qf={}", list(&self.terminal_weight)),
            format!("x0={}", list(&self.x0)),
            format!("backend_list={}", self.backends.iter().map(|b| b.as_str()).collect::<Vec<_>>().join(",")),
            format!("trajopt.dt_list={}", list(&self.trajopt.dt_list)),
            format!("trajopt.horizon_time={:e}", self.trajopt.horizon_time),
            format!("trajopt.n_iter={}", self.trajopt.n_iter),
            format!("mpc.dt_list={}", list(&self.mpc.dt_list)),
            format!("mpc.n_iter_list={}", ints(&self.mpc.n_iter_list)),
            format!("mpc.dt={:e}", self.mpc.dt),
            format!("mpc.n_iter={}", self.mpc.n_iter),
            format!("mpc.horizon_time={:e}", self.mpc.horizon_time),
            format!("mpc.sim_time={:e}", self.mpc.sim_time),
            format!("mpc.plant_substeps={}", self.mpc.plant_substeps),
            format!("solver.integrator_substeps={}", self.solver.integrator_substeps),
            format!("solver.mu={:e}", self.solver.mu),
            format!("solver.always_adopt={}", self.solver.always_adopt),
            format!("solver.alphas={}", list(&self.solver.alphas)),
            format!("oracle.seed_radius={:e}", self.oracle.seed_radius),
            format!("oracle.t_end={:e}", self.oracle.t_end),
            format!("oracle.grid_points={}", self.oracle.grid_points),
            format!("oracle.resample_step={:e}", self.oracle.resample_step),
        ];
        lines.join("\n")
    }

    /// Short hash of [`canonical`](Self::canonical). Worker count and cache
    /// location do not affect results and are left out.
    pub fn hash(&self) -> String {
        short_hash(&self.canonical())
    }

    /// Hash of everything the oracle depends on.
    pub fn oracle_hash(&self) -> String {
        let p = &self.pendulum;
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        short_hash(&format!(
            "{:e},{:e},{:e},{:e}|{}|{}|{}|{:e},{:e},{},{:e}",
            p.mass,
            p.gravity,
            p.length,
            p.inertia,
            list(&self.state_weight),
            list(&self.input_weight),
            list(&self.x0),
            self.oracle.seed_radius,
            self.oracle.t_end,
            self.oracle.grid_points,
            self.oracle.resample_step,
        ))
    }
}

fn short_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.mpc.n_iter_list, vec![1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn parses_values_lists_and_comments() {
        let text = "
            # pendulum
            pendulum.M = 1.0   # kg
            x0 = -pi, 0
            mpc.n_iter_list = 1..3, 7
            backend_list = ve
            solver.always_adopt = true
            oracle.cache_dir = /tmp/oracles
        ";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.pendulum.mass, 1.0);
        assert!((cfg.pendulum.inertia - 0.03).abs() < 1e-15);
        assert_eq!(cfg.x0, vec![-PI, 0.0]);
        assert_eq!(cfg.mpc.n_iter_list, vec![1, 2, 3, 7]);
        assert_eq!(cfg.backends, vec![Backend::Variational]);
        assert!(cfg.solver.always_adopt);
        assert_eq!(cfg.oracle.cache_dir, Some(PathBuf::from("/tmp/oracles")));
    }

    #[test]
    fn pi_multiples() {
        assert_eq!(parse_scalar("k", "0.5*pi").unwrap(), 0.5 * PI);
        assert_eq!(parse_scalar("k", "-2*pi").unwrap(), -2.0 * PI);
        assert!(parse_scalar("k", "pie").is_err());
    }

    #[test]
    fn explicit_inertia_wins() {
        let cfg = ExperimentConfig::parse("pendulum.J = 0.5\npendulum.M = 2").unwrap();
        assert_eq!(cfg.pendulum.inertia, 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "pendulum.mass = 1",
            "x0 = 1",
            "x0 = 1, 2\nx0 = 1, 2",
            "mpc.dt_list = 0.01, -0.02",
            "mpc.n_iter_list = 0..2",
            "mpc.n_iter_list = 3..1",
            "cost.R = 0",
            "cost.Qs = 1, nan",
            "backend_list = rk",
            "just words",
            "pendulum.L = ",
            "pendulum.M = -1",
            "solver.alphas = 2",
            "sweep.workers = 0",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn hash_tracks_settings_but_not_workers() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::parse("sweep.workers = 4").unwrap();
        let c = ExperimentConfig::parse("mpc.sim_time = 3").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.oracle_hash(), c.oracle_hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn canonical_text_reparses_to_same_config() {
        let cfg = ExperimentConfig::parse("x0 = -pi, 0.25\nmpc.n_iter_list = 2, 4").unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.canonical()).unwrap(), cfg);
    }
}
