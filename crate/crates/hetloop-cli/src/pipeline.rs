//! Staged pipeline. Every stage writes `<out>/<stage>/data.json` plus plot-ready
//! exports and is reused when the manifest records the same input hash and all
//! of its outputs still carry their recorded checksums.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hetloop::bloch::{self, ScalingFit, SpectralSweep, SweepOptions};
use hetloop::evans::{self, CriticalCurveAnalytic, ReducedEvansData, SolveOptions};
use hetloop::melnikov::{self, AdjointProfile, LimitVectors, MelnikovData, ProductSet};
use hetloop::orbits::{self, KernelCertificate, LoopLocus, OrbitOptions, PeriodicFamily};
use hetloop::pde::{self, DampingLedger, DecayReport, EvolutionRun, RunOptions, Window};
use hetloop::spectral;
use hetloop::wave::{self, SpectralWave, WaveError};
use num_complex::Complex64 as C;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{RunConfig, Stage};
use crate::report;

pub const MANIFEST: &str = "manifest.json";
const DATA: &str = "data.json";
const FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest {path} is unreadable: {message}")]
    Manifest { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
    Below,
    Above,
}

/// One pass/fail check on a stage result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub relation: Relation,
    pub pass: bool,
}

impl Gate {
    fn new(name: impl Into<String>, value: f64, relation: Relation, limit: f64) -> Self {
        let pass = value.is_finite()
            && match relation {
                Relation::AtMost => value <= limit,
                Relation::AtLeast => value >= limit,
                Relation::Below => value < limit,
                Relation::Above => value > limit,
            };
        // non-finite numbers do not survive JSON
        let value = if value.is_finite() { value } else { f64::MAX.copysign(if value.is_nan() { 1.0 } else { value }) };
        Self { name: name.into(), value, limit, relation, pass }
    }

    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::new(name, value, Relation::AtMost, limit)
    }

    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::new(name, value, Relation::AtLeast, limit)
    }

    pub fn below(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::new(name, value, Relation::Below, limit)
    }

    pub fn above(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self::new(name, value, Relation::Above, limit)
    }

    pub fn flag(name: impl Into<String>, ok: bool) -> Self {
        Self::new(name, if ok { 1.0 } else { 0.0 }, Relation::AtLeast, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    Cached,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub input_hash: String,
    pub outputs: Vec<FileRecord>,
    pub wall_time_s: f64,
    pub gates: Vec<Gate>,
    pub cached: bool,
}

impl StageRecord {
    pub fn succeeded(&self) -> bool {
        matches!(self.status, Status::Completed | Status::Cached)
    }

    pub fn gates_pass(&self) -> bool {
        self.gates.iter().all(|g| g.pass)
    }

    pub fn data_file(&self) -> Option<&FileRecord> {
        self.outputs.iter().find(|f| f.path.ends_with(DATA))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Option<Manifest>, PipelineError> {
        let path = out.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| PipelineError::Manifest { path: path.display().to_string(), message: e.to_string() })
    }

    fn save(&self, out: &Path) -> Result<(), PipelineError> {
        let path = out.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

/// Result of a pipeline invocation.
#[derive(Debug, Clone)]
pub struct Outcome {
    /// Records of the stages touched by this invocation, in execution order.
    pub records: Vec<StageRecord>,
}

impl Outcome {
    /// 0 all gates pass, 1 a gate failed, 3 a stage failed numerically.
    pub fn exit_code(&self) -> i32 {
        if self.records.iter().any(|r| matches!(r.status, Status::Failed | Status::Skipped)) {
            3
        } else if self.records.iter().any(|r| !r.gates_pass()) {
            1
        } else {
            0
        }
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.records.iter().find(|r| r.stage == stage)
    }

    pub fn all_cached(&self) -> bool {
        self.records.iter().all(|r| r.status == Status::Cached)
    }
}

// ---------------------------------------------------------------- artifacts

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopArtifact {
    pub a: f64,
    pub locus: LoopLocus,
    pub certificates: [KernelCertificate; 2],
    pub collocation_defects: [f64; 2],
    /// `[[alpha_1^s, alpha_1^u], [alpha_2^s, alpha_2^u]]`.
    pub rates: [[f64; 2]; 2],
    pub case_tag: evans::CaseTag,
    pub gray_zone: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodicArtifact {
    pub family: PeriodicFamily,
    pub collocation_defects: Vec<f64>,
    /// Slope of `ln sup-distance` against `min(L1, L2)`.
    pub sup_slope: Option<f64>,
    /// Slope of `ln |mu_T|` against `min(L1, L2)`.
    pub mu_slope: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelnikovArtifact {
    pub psi1: AdjointProfile,
    pub psi2: AdjointProfile,
    pub data: MelnikovData,
    pub refined_m: [f64; 2],
    /// `N_c` through the interpolated orbit derivative.
    pub n_c_derivative: [f64; 2],
    pub tangent_pairing: [f64; 2],
    pub adjoint_residual: [f64; 2],
    pub limits: LimitVectors,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReduceEntry {
    pub data: ReducedEvansData,
    pub curve: CriticalCurveAnalytic,
    pub product_gaps: ProductSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReduceArtifact {
    pub entries: Vec<ReduceEntry>,
}

/// Hill and reduced-determinant eigenvalues at `xi = +-pi/(2T)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossCheck {
    pub xi: [f64; 2],
    pub hill: [C; 2],
    pub closed: [C; 2],
    pub quadratic: [C; 2],
    pub closed_error: f64,
    pub quadratic_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub wave: SpectralWave,
    pub wave_tail: f64,
    pub sweep: SpectralSweep,
    pub cross: CrossCheck,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepArtifact {
    pub entries: Vec<SweepEntry>,
    pub scaling: ScalingFit,
    pub alpha_1s: f64,
    /// Change of the critical eigenvalue at `pi/(2T)` of the smallest period
    /// when the number of modes is doubled, relative to its modulus.
    pub k_refinement: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolveArtifact {
    pub period: f64,
    pub cells: usize,
    pub nx: usize,
    pub dt: f64,
    pub stability_bound: f64,
    pub tangency: (f64, f64),
    pub run: EvolutionRun,
    pub decay: DecayReport,
    pub damping: DampingLedger,
}

/// Everything loaded or computed so far in one invocation.
#[derive(Debug, Default)]
struct Store {
    looped: Option<LoopArtifact>,
    periodic: Option<PeriodicArtifact>,
    melnikov: Option<MelnikovArtifact>,
    reduce: Option<ReduceArtifact>,
    sweep: Option<SweepArtifact>,
    evolve: Option<EvolveArtifact>,
}

enum Product {
    Loop(LoopArtifact),
    Periodic(PeriodicArtifact),
    Melnikov(MelnikovArtifact),
    Reduce(ReduceArtifact),
    Sweep(SweepArtifact),
    Evolve(EvolveArtifact),
    Report,
}

impl Store {
    fn insert(&mut self, p: Product) {
        match p {
            Product::Loop(a) => self.looped = Some(a),
            Product::Periodic(a) => self.periodic = Some(a),
            Product::Melnikov(a) => self.melnikov = Some(a),
            Product::Reduce(a) => self.reduce = Some(a),
            Product::Sweep(a) => self.sweep = Some(a),
            Product::Evolve(a) => self.evolve = Some(a),
            Product::Report => {}
        }
    }
}

/// Output of a stage body: JSON data, extra files and gates.
struct StageOutput {
    product: Product,
    data: String,
    files: Vec<(String, String)>,
    gates: Vec<Gate>,
}

fn to_json<T: Serialize + DeserializeOwned>(value: &T) -> Result<String, String> {
    let text = serde_json::to_string(value).map_err(|e| e.to_string())?;
    // a non-finite number would come back as null and break the cache
    serde_json::from_str::<T>(&text).map_err(|e| format!("artifact does not round-trip through JSON: {e}"))?;
    Ok(text)
}

fn output<T: Serialize + DeserializeOwned>(
    value: T,
    wrap: fn(T) -> Product,
    files: Vec<(String, String)>,
    gates: Vec<Gate>,
) -> Result<StageOutput, String> {
    let data = to_json(&value)?;
    Ok(StageOutput { product: wrap(value), data, files, gates })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ------------------------------------------------------------ stage bodies

pub fn orbit_options(cfg: &RunConfig) -> OrbitOptions {
    OrbitOptions {
        half_length: cfg.orbits.half_length,
        nodes: cfg.orbits.nodes,
        tol: cfg.orbits.tol,
        periodic_nodes: cfg.orbits.periodic_nodes,
        eps_ceiling: cfg.model.eps_ceiling,
    }
}

/// Configuration subset that determines a stage's result.
fn config_subset(cfg: &RunConfig, stage: Stage) -> serde_json::Value {
    use serde_json::json;
    let opts = orbit_options(cfg);
    match stage {
        Stage::Loop => json!({ "model": cfg.model, "orbits": opts }),
        Stage::Periodic => json!({
            "orbits": opts,
            "periods": cfg.orbits.periods,
            "min_period": cfg.orbits.min_period,
            "period_heuristic": cfg.orbits.period_heuristic,
            "tube_radius": cfg.orbits.tube_radius,
        }),
        Stage::Melnikov => json!(cfg.melnikov),
        Stage::Reduce => json!(cfg.reduce),
        Stage::Sweep => json!(cfg.sweep),
        Stage::Evolve => json!(cfg.evolve),
        Stage::Report => json!(null),
    }
}

fn log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    Some(bloch::linear_fit(x, &ly).0)
}

fn run_loop(cfg: &RunConfig) -> Result<StageOutput, String> {
    let opts = orbit_options(cfg);
    let locus = orbits::locate_loop(cfg.model.a, cfg.model.epsilon, &opts).map_err(|e| e.to_string())?;
    let certificates = [
        orbits::variational_certificate(&locus.h1).map_err(|e| e.to_string())?,
        orbits::variational_certificate(&locus.h2).map_err(|e| e.to_string())?,
    ];
    let rates = melnikov::leading_rates(&locus.h1.params).map_err(|e| e.to_string())?;
    let (case_tag, gray_zone) = evans::classify(&rates);
    let collocation_defects = [locus.h1.collocation_defect(), locus.h2.collocation_defect()];
    let mut gates = Vec::new();
    for i in 0..2 {
        gates.push(Gate::at_most(format!("h{}.splitting_residual", i + 1), locus.splitting_residuals[i], 1e-8));
        gates.push(Gate::at_most(format!("h{}.bvp_residual", i + 1), collocation_defects[i], 1e-8));
        gates.push(Gate::at_least(format!("h{}.kernel_ratio", i + 1), certificates[i].ratio, 100.0));
    }
    let files = vec![
        ("h1.txt".to_string(), locus.h1.to_checkpoint()),
        ("h2.txt".to_string(), locus.h2.to_checkpoint()),
    ];
    let art = LoopArtifact { a: cfg.model.a, locus, certificates, collocation_defects, rates, case_tag, gray_zone };
    output(art, Product::Loop, files, gates)
}

fn run_periodic(cfg: &RunConfig, store: &Store) -> Result<StageOutput, String> {
    let lp = &store.looped.as_ref().ok_or("loop artifact missing")?.locus;
    let family = orbits::continue_periodic(
        lp,
        &cfg.orbits.periods,
        &orbit_options(cfg),
        cfg.orbits.period_heuristic,
        cfg.orbits.tube_radius,
    )
    .map_err(|e| e.to_string())?;
    let mut gates = Vec::new();
    for (t, msg) in &family.failures {
        gates.push(Gate::flag(format!("T{t}.converged ({msg})"), false));
    }
    let mut defects = Vec::new();
    let mut files = Vec::new();
    let mut table = String::from("period,l1,l2,mu_gamma,mu_c,closure,sup_distance,tube_fraction,bvp_residual\n");
    for e in &family.entries {
        let defect = e.orbit.collocation_defect();
        defects.push(defect);
        gates.push(Gate::at_most(format!("T{}.closure", e.period), e.closure, 1e-9));
        gates.push(Gate::at_most(format!("T{}.bvp_residual", e.period), defect, 1e-8));
        table += &format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            e.period, e.l1, e.l2, e.mu[0], e.mu[1], e.closure, e.sup_distance, e.tube_fraction, defect
        );
        files.push((format!("orbit_T{}.txt", e.period), e.orbit.to_checkpoint()));
    }
    let ls: Vec<f64> = family.entries.iter().map(|e| e.l1.min(e.l2)).collect();
    let sups: Vec<f64> = family.entries.iter().map(|e| e.sup_distance).collect();
    let mus: Vec<f64> = family.entries.iter().map(|e| e.mu[0].hypot(e.mu[1])).collect();
    let sup_slope = log_slope(&ls, &sups);
    let mu_slope = log_slope(&ls, &mus);
    if let (Some(s), Some(m)) = (sup_slope, mu_slope) {
        gates.push(Gate::at_most("sup_distance_slope", s, -0.75 * family.alpha));
        gates.push(Gate::at_most("mu_slope", m, -family.alpha));
    }
    if let Some(last) = family.entries.last() {
        gates.push(Gate::above("tube_fraction_largest_period", last.tube_fraction, 0.8));
    }
    files.push(("family.csv".to_string(), table));
    let art = PeriodicArtifact { family, collocation_defects: defects, sup_slope, mu_slope };
    output(art, Product::Periodic, files, gates)
}

fn run_melnikov(cfg: &RunConfig, store: &Store) -> Result<StageOutput, String> {
    let lp = &store.looped.as_ref().ok_or("loop artifact missing")?.locus;
    let (h1, h2) = (&lp.h1, &lp.h2);
    let s = |e: melnikov::MelnikovError| e.to_string();
    let (psi1, psi2) = melnikov::compute_adjoint_pair(h1, h2).map_err(s)?;
    let data = melnikov::melnikov_data(h1, h2, &psi1, &psi2).map_err(s)?;
    let sub = cfg.melnikov.refine;
    let refined_m = [
        melnikov::melnikov_lambda_refined(&psi1, h1, sub).map_err(s)?.value,
        melnikov::melnikov_lambda_refined(&psi2, h2, sub).map_err(s)?.value,
    ];
    let n_c_derivative = [melnikov::melnikov_c_via_derivative(&psi1, h1), melnikov::melnikov_c_via_derivative(&psi2, h2)];
    let tangent_pairing = [melnikov::tangent_pairing(&psi1, h1), melnikov::tangent_pairing(&psi2, h2)];
    let adjoint_residual = [psi1.residual().map_err(s)?, psi2.residual().map_err(s)?];
    let limits = melnikov::limit_vectors(h1, h2, &psi1, &psi2).map_err(s)?;
    let margin = cfg.melnikov.margin;
    let mut gates = Vec::new();
    for i in 0..2 {
        let tag = i + 1;
        gates.push(Gate::below(format!("M{tag}.sign"), data.m[i], 0.0));
        gates.push(Gate::at_least(format!("M{tag}.margin"), data.m[i].abs() / data.m_error[i], margin));
        gates.push(Gate::at_most(
            format!("M{tag}.refinement"),
            ((refined_m[i] - data.m[i]) / data.m[i]).abs(),
            1e-6,
        ));
        gates.push(Gate::at_most(
            format!("N{tag}_c.two_paths"),
            ((n_c_derivative[i] - data.n[i][1]) / data.n[i][1]).abs(),
            1e-6,
        ));
        gates.push(Gate::at_most(format!("psi{tag}.tangent_pairing"), tangent_pairing[i], 1e-8));
        gates.push(Gate::at_most(format!("psi{tag}.residual"), adjoint_residual[i], 1e-8));
    }
    gates.push(Gate::at_least("det_N.margin", data.det_n.abs() / data.det_n_error, margin));
    let mut table = String::from("name,value,error\n");
    table += &format!("M1,{:e},{:e}\nM2,{:e},{:e}\n", data.m[0], data.m_error[0], data.m[1], data.m_error[1]);
    for (i, row) in data.n.iter().enumerate() {
        table += &format!("N{}_gamma,{:e},{:e}\n", i + 1, row[0], data.n_error[i][0]);
        table += &format!("N{}_c,{:e},{:e}\n", i + 1, row[1], data.n_error[i][1]);
    }
    table += &format!("det_N,{:e},{:e}\n", data.det_n, data.det_n_error);
    let files = vec![
        ("psi1.txt".to_string(), psi1.profile.to_checkpoint()),
        ("psi2.txt".to_string(), psi2.profile.to_checkpoint()),
        ("melnikov.csv".to_string(), table),
    ];
    let art = MelnikovArtifact { psi1, psi2, data, refined_m, n_c_derivative, tangent_pairing, adjoint_residual, limits };
    output(art, Product::Melnikov, files, gates)
}

fn solve_options(cfg: &RunConfig) -> SolveOptions {
    SolveOptions { radius: cfg.reduce.radius, min_margin: cfg.reduce.min_margin }
}

fn run_reduce(cfg: &RunConfig, store: &Store) -> Result<StageOutput, String> {
    let lp = &store.looped.as_ref().ok_or("loop artifact missing")?.locus;
    let fam = &store.periodic.as_ref().ok_or("periodic artifact missing")?.family;
    let mel = store.melnikov.as_ref().ok_or("melnikov artifact missing")?;
    let mut entries = Vec::new();
    let mut files = Vec::new();
    let mut gates = Vec::new();
    for e in &fam.entries {
        let bp = melnikov::boundary_products(&mel.psi1, &mel.psi2, &lp.h1, &lp.h2, e.l1, e.l2).map_err(|e| e.to_string())?;
        let data = ReducedEvansData::new(&bp, &mel.data, e.period);
        let curve = evans::critical_curve(&data, cfg.reduce.xi_count, &solve_options(cfg)).map_err(|e| e.to_string())?;
        let t = e.period;
        let worst_re = curve
            .quadratic
            .iter()
            .zip(&curve.xi)
            .filter(|(_, x)| **x != 0.0)
            .map(|(z, _)| z.re)
            .fold(f64::NEG_INFINITY, f64::max);
        gates.push(Gate::below(format!("T{t}.max_re_off_zero"), worst_re, 0.0));
        gates.push(Gate::above(format!("T{t}.d"), curve.quadratic_bd.1, 0.0));
        gates.push(Gate::below(format!("T{t}.interface_eigenvalue"), curve.interface_eigenvalue, 0.0));
        files.push((format!("curve_T{t}.csv"), evans::curve_csv(&curve)));
        entries.push(ReduceEntry { product_gaps: bp.relative_gaps(), data, curve });
    }
    if entries.len() >= 2 {
        let worst = |g: &ProductSet| g.s.iter().chain(&g.u).copied().fold(0.0, f64::max);
        let first = worst(&entries[0].product_gaps);
        let last = worst(&entries.last().unwrap().product_gaps);
        gates.push(Gate::below("product_gap_shrinks", last / first, 1.0));
    }
    output(ReduceArtifact { entries }, Product::Reduce, files, gates)
}

fn polish(orbit: &orbits::OrbitProfile, period: f64, tail_limit: f64) -> Result<SpectralWave, String> {
    let n = spectral::smooth_odd_at_least((2.0 * period) as usize + 1);
    match wave::polish_wave(orbit, n, tail_limit) {
        Err(WaveError::Unresolved { .. }) => wave::polish_wave(orbit, 2 * n, tail_limit).map_err(|e| e.to_string()),
        r => r.map_err(|e| e.to_string()),
    }
}

fn relative(a: C, b: C) -> f64 {
    (a - b).norm() / a.norm()
}

fn run_sweep(cfg: &RunConfig, store: &Store) -> Result<StageOutput, String> {
    let lp = &store.looped.as_ref().ok_or("loop artifact missing")?;
    let fam = &store.periodic.as_ref().ok_or("periodic artifact missing")?.family;
    let red = store.reduce.as_ref().ok_or("reduce artifact missing")?;
    let sc = &cfg.sweep;
    let opts = SweepOptions {
        xi_count: sc.xi_count,
        k: (sc.k > 0).then_some(sc.k),
        r1_fraction: sc.r1_fraction,
        cluster: sc.cluster,
        fit_max_residual: sc.fit_max_residual,
    };
    let mut entries = Vec::new();
    let mut gates = Vec::new();
    let mut files = Vec::new();
    let mut cross_table = String::from("period,xi,hill_re,hill_im,closed_re,closed_im,quadratic_re,quadratic_im\n");
    for e in &fam.entries {
        let t = e.period;
        let wave = polish(&e.orbit, t, sc.tail_limit)?;
        let sw = bloch::sweep(&wave, &opts).map_err(|e| e.to_string())?;
        let data = &red
            .entries
            .iter()
            .find(|r| (r.data.period - t).abs() < 1e-9)
            .ok_or_else(|| format!("no reduced data for T = {t}"))?
            .data;
        let xi = [-PI / (2.0 * t), PI / (2.0 * t)];
        let mut hill = [C::new(0.0, 0.0); 2];
        let mut closed = hill;
        let mut quadratic = hill;
        for j in 0..2 {
            hill[j] = bloch::critical_eigenvalue(&wave, sw.k, xi[j], sw.radius).map_err(|e| e.to_string())?;
            let s = evans::solve_lambda(xi[j], data, &solve_options(cfg)).map_err(|e| e.to_string())?;
            closed[j] = s.closed;
            quadratic[j] = s.quadratic;
            cross_table += &format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                t, xi[j], hill[j].re, hill[j].im, closed[j].re, closed[j].im, quadratic[j].re, quadratic[j].im
            );
        }
        let err = |v: &[C; 2]| relative(hill[0], v[0]).max(relative(hill[1], v[1]));
        let cross = CrossCheck { xi, hill, closed, quadratic, closed_error: err(&closed), quadratic_error: err(&quadratic) };
        let c = &sw.certification;
        gates.push(Gate::flag(format!("T{t}.cond1"), c.cond1));
        gates.push(Gate::flag(format!("T{t}.cond2"), c.cond2));
        gates.push(Gate::flag(format!("T{t}.cond3"), c.cond3));
        gates.push(Gate::at_most(format!("T{t}.translation_residual"), c.translation_residual, 1e-6));
        gates.push(Gate::at_least(format!("T{t}.zero_gap_ratio"), c.zero_gap / c.zero_eigenvalue.norm().max(1e-300), 1e3));
        match &sw.fit {
            Some(f) => gates.push(Gate::above(format!("T{t}.d"), f.d, 0.0)),
            None => gates.push(Gate::flag(format!("T{t}.tangency_fit"), false)),
        }
        gates.push(Gate::above(format!("T{t}.theta"), c.theta, 0.0));
        files.push((format!("sweep_T{t}.csv"), sw.csv()));
        let mut wtab = String::from("x,u,w\n");
        for (j, x) in wave.grid().iter().enumerate() {
            wtab += &format!("{:e},{:e},{:e}\n", x, wave.u[j], wave.w[j]);
        }
        files.push((format!("wave_T{t}.csv"), wtab));
        entries.push(SweepEntry { wave_tail: wave.tail(), wave, sweep: sw, cross });
    }
    if entries.is_empty() {
        return Err("no periodic orbits to sweep".into());
    }
    let first = &entries[0];
    let last = entries.last().unwrap();
    gates.push(Gate::at_most("cross_method_largest_period", last.cross.quadratic_error, sc.agreement));
    if entries.len() >= 2 {
        gates.push(Gate::at_most(
            "cross_method_shrink_ratio",
            last.cross.quadratic_error / first.cross.quadratic_error,
            0.5,
        ));
    }
    // doubled K at the smallest period
    let k2 = 2 * first.sweep.k;
    let xi1 = PI / (2.0 * first.wave.period);
    let fine = bloch::critical_eigenvalue(&first.wave, k2, xi1, first.sweep.radius).map_err(|e| e.to_string())?;
    let k_refinement = relative(first.cross.hill[1], fine);
    gates.push(Gate::at_most("k_refinement", k_refinement, 1e-6));

    let half: Vec<f64> = fam.entries.iter().map(|e| e.l1 + e.l2).collect();
    let sweeps: Vec<&SpectralSweep> = entries.iter().map(|e| &e.sweep).collect();
    let alpha_1s = lp.rates[0][0];
    let scaling = if sweeps.len() >= 3 {
        let s = bloch::exponential_scaling_study(&half, &sweeps).map_err(|e| e.to_string())?;
        gates.push(Gate::at_most("scaling_slope_deviation", ((s.slope + alpha_1s) / alpha_1s).abs(), sc.scaling_tolerance));
        s
    } else {
        let log_max = sweeps.iter().map(|s| s.max_critical().ln()).collect();
        ScalingFit { slope: 0.0, intercept: 0.0, half_lengths: half.clone(), log_max, residuals: Vec::new() }
    };
    let mut stab = String::from("half_length_sum,ln_max_lambda_c\n");
    for (h, l) in scaling.half_lengths.iter().zip(&scaling.log_max) {
        stab += &format!("{:e},{:e}\n", h, l);
    }
    files.push(("scaling.csv".to_string(), stab));
    files.push(("cross_method.csv".to_string(), cross_table));
    let art = SweepArtifact { entries, scaling, alpha_1s, k_refinement };
    output(art, Product::Sweep, files, gates)
}

fn run_evolve(cfg: &RunConfig, store: &Store) -> Result<StageOutput, String> {
    let sw = store.sweep.as_ref().ok_or("sweep artifact missing")?;
    let ec = &cfg.evolve;
    let entry = sw
        .entries
        .iter()
        .find(|e| (e.wave.period - ec.period).abs() < 1e-9)
        .ok_or_else(|| format!("no swept wave of period {}", ec.period))?;
    let fit = entry.sweep.fit.ok_or_else(|| format!("no tangency fit for period {}", ec.period))?;
    let window = Window::new(&entry.wave, ec.cells);
    let spec = ec.perturbation.spec();
    let opts = RunOptions {
        dt: ec.dt,
        t_end: ec.t_end,
        sample_dt: ec.sample_dt,
        phase_samples: ec.phase_samples,
        eps0: ec.eps0,
        min_cells: 40,
        snapshots: ec.snapshots.clone(),
    };
    let bound = pde::stability_bound(&entry.wave.params, wave_range(&entry.wave));
    let run = pde::run_experiment(&window, &spec, &opts, Some((fit.b, fit.d))).map_err(|e| e.to_string())?;
    let decay = pde::modulated_decay_report(&run).map_err(|e| e.to_string())?;
    let damping = pde::damping_check(&run, None);
    let mut gates = vec![
        Gate::flag("no_blowup", run.blowup.is_none()),
        Gate::at_least("t_end_before_wrap", run.wrap_time, ec.t_end),
        Gate::at_least("vtilde_exponent_lower", decay.vtilde_l2.exponent, -0.45),
        Gate::at_most("vtilde_exponent_upper", decay.vtilde_l2.exponent, -0.10),
        Gate::flag("damping_certified", damping.certified),
    ];
    match &decay.v_l2 {
        Some(v) => {
            gates.push(Gate::at_most("v_exponent", v.exponent, -0.5));
            gates.push(Gate::at_least("modulation_separation", decay.vtilde_l2.exponent - v.exponent, 0.25));
        }
        None => gates.push(Gate::flag("v_exponent", false)),
    }
    let mut files = vec![
        ("norms.csv".to_string(), run.csv()),
        ("phase.csv".to_string(), run.phase_csv()),
    ];
    let mut dtab = String::from("t,c_required\n");
    for (t, c) in run.t.iter().zip(&damping.c_required) {
        dtab += &format!("{:e},{:e}\n", t, c);
    }
    files.push(("damping.csv".to_string(), dtab));
    for s in &run.snapshots {
        files.push((format!("snapshot_t{}.txt", s.t), s.to_text()));
    }
    let art = EvolveArtifact {
        period: ec.period,
        cells: ec.cells,
        nx: window.nx(),
        dt: ec.dt,
        stability_bound: bound,
        tangency: (fit.b, fit.d),
        run,
        decay,
        damping,
    };
    output(art, Product::Evolve, files, gates)
}

fn wave_range(w: &SpectralWave) -> (f64, f64) {
    let lo = w.u.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo - 0.1, hi + 0.1)
}

fn run_body(stage: Stage, cfg: &RunConfig, store: &Store, out: &Path) -> Result<StageOutput, String> {
    match stage {
        Stage::Loop => run_loop(cfg),
        Stage::Periodic => run_periodic(cfg, store),
        Stage::Melnikov => run_melnikov(cfg, store),
        Stage::Reduce => run_reduce(cfg, store),
        Stage::Sweep => run_sweep(cfg, store),
        Stage::Evolve => run_evolve(cfg, store),
        Stage::Report => {
            let rep = report::emit_report(out).map_err(|e| e.to_string())?;
            let errors = report::validate(&report::bundled_schema(), &rep.json);
            let gates = vec![
                Gate::flag("schema_valid", errors.is_empty()),
                Gate::flag("stage_gates", rep.all_gates_pass),
            ];
            let data = serde_json::to_string_pretty(&rep.json).map_err(|e| e.to_string())?;
            let files = vec![
                ("constants.csv".to_string(), rep.constants_csv),
                ("gates.csv".to_string(), rep.gates_csv),
            ];
            Ok(StageOutput { product: Product::Report, data, files, gates })
        }
    }
}

fn load_product(stage: Stage, text: &str) -> Result<Product, String> {
    fn de<T: DeserializeOwned>(t: &str) -> Result<T, String> {
        serde_json::from_str(t).map_err(|e| e.to_string())
    }
    Ok(match stage {
        Stage::Loop => Product::Loop(de(text)?),
        Stage::Periodic => Product::Periodic(de(text)?),
        Stage::Melnikov => Product::Melnikov(de(text)?),
        Stage::Reduce => Product::Reduce(de(text)?),
        Stage::Sweep => Product::Sweep(de(text)?),
        Stage::Evolve => Product::Evolve(de(text)?),
        Stage::Report => Product::Report,
    })
}

/// Loads a stage's typed artifact from an output directory.
pub fn load_artifact<T: DeserializeOwned>(out: &Path, stage: Stage) -> Option<T> {
    let text = std::fs::read_to_string(out.join(stage.name()).join(DATA)).ok()?;
    serde_json::from_str(&text).ok()
}

// ------------------------------------------------------------- execution

/// Stages in dependency levels; stages in one level may run concurrently.
const LEVELS: [&[Stage]; 6] = [
    &[Stage::Loop],
    &[Stage::Periodic, Stage::Melnikov],
    &[Stage::Reduce],
    &[Stage::Sweep],
    &[Stage::Evolve],
    &[Stage::Report],
];

/// Requested stages plus everything they depend on.
pub fn closure(requested: &[Stage]) -> Vec<Stage> {
    let mut set: Vec<Stage> = requested.to_vec();
    let mut i = 0;
    while i < set.len() {
        for d in set[i].dependencies() {
            if !set.contains(d) {
                set.push(*d);
            }
        }
        i += 1;
    }
    set.sort();
    set.dedup();
    set
}

enum CacheProbe {
    Hit(Product, StageRecord),
    Miss,
    Corrupt(String),
}

fn probe_cache(out: &Path, prev: Option<&StageRecord>, hash: &str, stage: Stage) -> CacheProbe {
    let Some(prev) = prev else { return CacheProbe::Miss };
    if prev.input_hash != hash || !prev.succeeded() || prev.data_file().is_none() {
        return CacheProbe::Miss;
    }
    let mut data = None;
    for f in &prev.outputs {
        let path = out.join(&f.path);
        let Ok(bytes) = std::fs::read(&path) else { return CacheProbe::Miss };
        let found = sha256_hex(&bytes);
        if found != f.sha256 {
            return CacheProbe::Corrupt(format!(
                "checksum mismatch in {}: expected {}, found {}",
                path.display(),
                f.sha256,
                found
            ));
        }
        if f.path.ends_with(DATA) {
            data = Some(String::from_utf8_lossy(&bytes).into_owned());
        }
    }
    match load_product(stage, data.as_deref().unwrap_or("")) {
        Ok(p) => {
            let mut rec = prev.clone();
            rec.status = Status::Cached;
            rec.cached = true;
            rec.message = None;
            rec.wall_time_s = 0.0;
            CacheProbe::Hit(p, rec)
        }
        Err(e) => CacheProbe::Corrupt(format!("{}: {e}", out.join(stage.name()).join(DATA).display())),
    }
}

fn write_outputs(out: &Path, stage: Stage, o: &StageOutput) -> Result<Vec<FileRecord>, PipelineError> {
    let dir = out.join(stage.name());
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut recs = Vec::new();
    let mut all: Vec<(&str, &str)> = vec![(DATA, o.data.as_str())];
    all.extend(o.files.iter().map(|(n, c)| (n.as_str(), c.as_str())));
    for (name, content) in all {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(io_err(&path))?;
        recs.push(FileRecord {
            path: format!("{}/{}", stage.name(), name),
            sha256: sha256_hex(content.as_bytes()),
            bytes: content.len() as u64,
        });
    }
    Ok(recs)
}

fn input_hash(cfg: &RunConfig, stage: Stage, upstream: &BTreeMap<String, String>) -> String {
    let doc = serde_json::json!({
        "format": FORMAT,
        "version": env!("CARGO_PKG_VERSION"),
        "stage": stage.name(),
        "config": config_subset(cfg, stage),
        "upstream": upstream,
    });
    sha256_hex(doc.to_string().as_bytes())
}

/// Runs `stages` (plus their dependencies) into `out`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, stages: &[Stage], force: bool) -> Result<Outcome, PipelineError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut manifest = Manifest::load(out)?.unwrap_or_default();
    manifest.format = FORMAT;
    let old = manifest.stages.clone();
    let selected = closure(stages);
    let mut store = Store::default();
    let mut records: Vec<StageRecord> = Vec::new();

    for level in LEVELS {
        let todo: Vec<Stage> = level.iter().copied().filter(|s| selected.contains(s)).collect();
        if todo.is_empty() {
            continue;
        }
        let results: Vec<Result<(StageRecord, Option<Product>), PipelineError>> = todo
            .par_iter()
            .map(|&stage| {
                let upstream: BTreeMap<String, String> = if stage == Stage::Report {
                    manifest
                        .stages
                        .values()
                        .filter(|r| r.stage != Stage::Report && r.succeeded())
                        .filter_map(|r| r.data_file().map(|f| (r.stage.name().to_string(), f.sha256.clone())))
                        .collect()
                } else {
                    stage
                        .dependencies()
                        .iter()
                        .filter_map(|d| {
                            records
                                .iter()
                                .find(|r| r.stage == *d)
                                .and_then(|r| r.data_file())
                                .map(|f| (d.name().to_string(), f.sha256.clone()))
                        })
                        .collect()
                };
                let hash = input_hash(cfg, stage, &upstream);
                let blocked = stage
                    .dependencies()
                    .iter()
                    .find(|d| !records.iter().any(|r| r.stage == **d && r.succeeded()));
                if let Some(d) = blocked {
                    return Ok((
                        StageRecord {
                            stage,
                            status: Status::Skipped,
                            message: Some(format!("dependency {} did not complete", d.name())),
                            input_hash: hash,
                            outputs: Vec::new(),
                            wall_time_s: 0.0,
                            gates: Vec::new(),
                            cached: false,
                        },
                        None,
                    ));
                }
                if !force {
                    match probe_cache(out, old.get(stage.name()), &hash, stage) {
                        CacheProbe::Hit(p, rec) => return Ok((rec, Some(p))),
                        CacheProbe::Corrupt(msg) => {
                            return Ok((
                                StageRecord {
                                    stage,
                                    status: Status::Failed,
                                    message: Some(msg),
                                    input_hash: hash,
                                    outputs: Vec::new(),
                                    wall_time_s: 0.0,
                                    gates: Vec::new(),
                                    cached: false,
                                },
                                None,
                            ))
                        }
                        CacheProbe::Miss => {}
                    }
                }
                let start = Instant::now();
                let (status, message, outputs, gates, product) = match run_body(stage, cfg, &store, out) {
                    Ok(o) => {
                        let files = write_outputs(out, stage, &o)?;
                        (Status::Completed, None, files, o.gates, Some(o.product))
                    }
                    Err(msg) => (Status::Failed, Some(msg), Vec::new(), Vec::new(), None),
                };
                Ok((
                    StageRecord {
                        stage,
                        status,
                        message,
                        input_hash: hash,
                        outputs,
                        wall_time_s: start.elapsed().as_secs_f64(),
                        gates,
                        cached: false,
                    },
                    product,
                ))
            })
            .collect();
        for r in results {
            let (rec, product) = r?;
            if let Some(p) = product {
                store.insert(p);
            }
            manifest.stages.insert(rec.stage.name().to_string(), rec.clone());
            records.push(rec);
        }
        manifest.save(out)?;
    }
    Ok(Outcome { records })
}

/// Output directory from the config, overridden by the command line.
pub fn resolve_out(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.clone())
}
