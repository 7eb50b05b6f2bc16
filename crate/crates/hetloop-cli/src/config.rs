//! Run configuration: TOML with one table per pipeline stage.

use std::path::{Path, PathBuf};

use hetloop::pde::{PerturbationSpec, Shape};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Loop,
    Periodic,
    Melnikov,
    Reduce,
    Sweep,
    Evolve,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Loop,
        Stage::Periodic,
        Stage::Melnikov,
        Stage::Reduce,
        Stage::Sweep,
        Stage::Evolve,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Loop => "loop",
            Stage::Periodic => "periodic",
            Stage::Melnikov => "melnikov",
            Stage::Reduce => "reduce",
            Stage::Sweep => "sweep",
            Stage::Evolve => "evolve",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Stages whose artifacts this stage reads.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Loop => &[],
            Stage::Periodic => &[Stage::Loop],
            Stage::Melnikov => &[Stage::Loop],
            Stage::Reduce => &[Stage::Loop, Stage::Periodic, Stage::Melnikov],
            Stage::Sweep => &[Stage::Loop, Stage::Periodic, Stage::Reduce],
            Stage::Evolve => &[Stage::Periodic, Stage::Sweep],
            Stage::Report => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub a: f64,
    pub epsilon: f64,
    pub eps_ceiling: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { a: 0.25, epsilon: 0.003, eps_ceiling: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitsConfig {
    pub half_length: f64,
    pub nodes: usize,
    pub periodic_nodes: usize,
    pub tol: f64,
    pub periods: Vec<f64>,
    pub min_period: f64,
    /// Largest admissible exp(-alpha T / 4) for a requested period.
    pub period_heuristic: f64,
    pub tube_radius: f64,
}

impl Default for OrbitsConfig {
    fn default() -> Self {
        Self {
            half_length: 120.0,
            nodes: 1600,
            periodic_nodes: 2400,
            tol: 1e-11,
            periods: vec![80.0, 112.0, 160.0],
            min_period: 40.0,
            period_heuristic: 0.05,
            tube_radius: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelnikovConfig {
    /// Subdivisions of each mesh interval for the refined quadrature.
    pub refine: usize,
    /// Required ratio of |M_i| (and |det N|) to the quadrature error.
    pub margin: f64,
}

impl Default for MelnikovConfig {
    fn default() -> Self {
        Self { refine: 2, margin: 1e3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReduceConfig {
    pub xi_count: usize,
    pub radius: f64,
    pub min_margin: f64,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self { xi_count: 33, radius: 0.1, min_margin: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub xi_count: usize,
    /// Fourier modes; 0 selects the wave's own resolution.
    pub k: usize,
    pub r1_fraction: f64,
    pub cluster: usize,
    pub fit_max_residual: f64,
    pub tail_limit: f64,
    /// Allowed relative deviation of the scaling slope from the rate.
    pub scaling_tolerance: f64,
    /// Allowed relative Hill/reduced-determinant mismatch at the largest period.
    pub agreement: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            xi_count: 33,
            k: 0,
            r1_fraction: 0.1,
            cluster: 2,
            fit_max_residual: 0.05,
            tail_limit: 1e-10,
            scaling_tolerance: 0.15,
            agreement: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    pub shape: Shape,
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    pub weights: [f64; 2],
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        let p = PerturbationSpec { width: 20.0, ..Default::default() };
        Self { shape: p.shape, amplitude: p.amplitude, center: p.center, width: p.width, weights: p.weights }
    }
}

impl PerturbationConfig {
    pub fn spec(&self) -> PerturbationSpec {
        PerturbationSpec {
            shape: self.shape,
            amplitude: self.amplitude,
            center: self.center,
            width: self.width,
            weights: self.weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveConfig {
    /// Period of the wave used; must be one of `orbits.periods`.
    pub period: f64,
    pub cells: usize,
    pub dt: f64,
    pub t_end: f64,
    pub sample_dt: f64,
    pub phase_samples: usize,
    pub eps0: f64,
    pub snapshots: Vec<f64>,
    pub perturbation: PerturbationConfig,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            period: 80.0,
            cells: 40,
            dt: 0.5,
            t_end: 16000.0,
            sample_dt: 2.0,
            phase_samples: 30,
            eps0: 0.5,
            snapshots: Vec::new(),
            perturbation: PerturbationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub model: ModelConfig,
    pub orbits: OrbitsConfig,
    pub melnikov: MelnikovConfig,
    pub reduce: ReduceConfig,
    pub sweep: SweepConfig,
    pub evolve: EvolveConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            seed: 1,
            stages: Stage::ALL.to_vec(),
            model: ModelConfig::default(),
            orbits: OrbitsConfig::default(),
            melnikov: MelnikovConfig::default(),
            reduce: ReduceConfig::default(),
            sweep: SweepConfig::default(),
            evolve: EvolveConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for Issue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("invalid configuration:\n{}", .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Issue>),
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map(|p| before.len() - p).unwrap_or(before.len() + 1);
    (line, column)
}

pub fn parse_str(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
        ConfigError::Parse { path: origin.to_string(), line, column, message: e.message().to_string() }
    })?;
    let issues = cfg.validate();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(issues))
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_str(&text, &path.display().to_string())
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// All semantic problems, not just the first.
    pub fn validate(&self) -> Vec<Issue> {
        let mut v = Vec::new();
        let mut push = |key: &str, msg: String| v.push(Issue { key: key.to_string(), message: msg });
        let pos = |x: f64| x.is_finite() && x > 0.0;

        let m = &self.model;
        if !(m.a > 0.0 && m.a < 0.5) {
            push("model.a", format!("must lie in (0, 1/2), got {}", m.a));
        }
        if !pos(m.eps_ceiling) {
            push("model.eps_ceiling", format!("must be positive, got {}", m.eps_ceiling));
        }
        if !(pos(m.epsilon) && m.epsilon <= m.eps_ceiling) {
            push("model.epsilon", format!("must lie in (0, eps_ceiling], got {}", m.epsilon));
        }

        let o = &self.orbits;
        for (key, val) in [("orbits.half_length", o.half_length), ("orbits.tol", o.tol), ("orbits.min_period", o.min_period), ("orbits.period_heuristic", o.period_heuristic), ("orbits.tube_radius", o.tube_radius)] {
            if !pos(val) {
                push(key, format!("must be positive, got {val}"));
            }
        }
        if o.nodes < 50 {
            push("orbits.nodes", format!("must be at least 50, got {}", o.nodes));
        }
        if o.periodic_nodes < 50 {
            push("orbits.periodic_nodes", format!("must be at least 50, got {}", o.periodic_nodes));
        }
        if o.periods.is_empty() {
            push("orbits.periods", "must not be empty".into());
        }
        if o.periods.windows(2).any(|w| w[1] <= w[0]) {
            push("orbits.periods", "must be strictly increasing".into());
        }
        if let Some(bad) = o.periods.iter().find(|t| !(t.is_finite() && **t >= o.min_period)) {
            push("orbits.periods", format!("period {bad} below orbits.min_period {}", o.min_period));
        }

        if !pos(self.melnikov.margin) {
            push("melnikov.margin", format!("must be positive, got {}", self.melnikov.margin));
        }
        if self.melnikov.refine == 0 {
            push("melnikov.refine", "must be at least 1".into());
        }

        let r = &self.reduce;
        if r.xi_count < 3 || r.xi_count % 2 == 0 {
            push("reduce.xi_count", format!("must be odd and at least 3, got {}", r.xi_count));
        }
        if !pos(r.radius) {
            push("reduce.radius", format!("must be positive, got {}", r.radius));
        }
        if !pos(r.min_margin) {
            push("reduce.min_margin", format!("must be positive, got {}", r.min_margin));
        }

        let s = &self.sweep;
        if s.xi_count < 33 || s.xi_count % 2 == 0 {
            push("sweep.xi_count", format!("must be odd and at least 33, got {}", s.xi_count));
        }
        for (key, val) in [
            ("sweep.r1_fraction", s.r1_fraction),
            ("sweep.fit_max_residual", s.fit_max_residual),
            ("sweep.tail_limit", s.tail_limit),
            ("sweep.scaling_tolerance", s.scaling_tolerance),
            ("sweep.agreement", s.agreement),
        ] {
            if !pos(val) {
                push(key, format!("must be positive, got {val}"));
            }
        }
        if s.cluster == 0 {
            push("sweep.cluster", "must be at least 1".into());
        }

        let e = &self.evolve;
        for (key, val) in [
            ("evolve.dt", e.dt),
            ("evolve.t_end", e.t_end),
            ("evolve.sample_dt", e.sample_dt),
            ("evolve.eps0", e.eps0),
            ("evolve.perturbation.width", e.perturbation.width),
        ] {
            if !pos(val) {
                push(key, format!("must be positive, got {val}"));
            }
        }
        if pos(e.dt) && pos(e.sample_dt) && e.sample_dt < e.dt {
            push("evolve.sample_dt", "must not be smaller than evolve.dt".into());
        }
        if e.cells < 40 {
            push("evolve.cells", format!("window needs at least 40 cells, got {}", e.cells));
        }
        if !o.periods.iter().any(|t| (t - e.period).abs() < 1e-9) && self.stages.contains(&Stage::Evolve) {
            push("evolve.period", format!("{} is not one of orbits.periods", e.period));
        }
        if !(e.perturbation.amplitude.is_finite() && e.perturbation.amplitude >= 0.0) {
            push("evolve.perturbation.amplitude", "must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&e.perturbation.center) {
            push("evolve.perturbation.center", "must lie in [0, 1]".into());
        }
        if let Some(t) = e.snapshots.iter().find(|t| !(**t >= 0.0 && **t <= e.t_end)) {
            push("evolve.snapshots", format!("time {t} outside [0, t_end]"));
        }

        if self.stages.is_empty() {
            push("stages", "must list at least one stage".into());
        }
        for st in &self.stages {
            for dep in st.dependencies() {
                if !self.stages.contains(dep) {
                    push("stages", format!("stage '{}' requires '{}'", st.name(), dep.name()));
                }
            }
        }
        if self.stages.contains(&Stage::Sweep) && o.periods.len() < 3 {
            push("orbits.periods", "the scaling study in 'sweep' needs at least 3 periods".into());
        }
        v
    }
}
