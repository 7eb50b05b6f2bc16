//! Time stepping of the co-moving-frame PDE on a window of many wave cells,
//! phase extraction and decay measurements.
//!
//! The integrator advances the perturbation `V = U - U_bar` with an
//! exponential (ETD2) scheme: diffusion, advection and the `-eps gamma w`
//! decay are solved exactly per Fourier mode, the reaction increment and the
//! `u`/`w` coupling are explicit. Nonlinear products are formed on a zero
//! padded grid twice as fine, which removes aliasing of the cubic exactly.

use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelParams;
use crate::spectral::{self, Fourier};
use crate::wave::SpectralWave;

type C = Complex64;

#[derive(Debug, Error)]
pub enum PdeError {
    #[error("time step {dt} above the stability bound {bound}")]
    StepTooLarge { dt: f64, bound: f64 },
    #[error("non-finite values at t = {0}")]
    NonFinite(f64),
    #[error("window needs at least {min} cells, got {got}")]
    WindowTooSmall { min: usize, got: usize },
    #[error("perturbation H4 norm {norm:e} above the smallness proxy {limit:e}")]
    TooLarge { norm: f64, limit: f64 },
    #[error("state does not match the window ({0} points)")]
    Shape(usize),
    #[error("too few samples for a fit: {0}")]
    TooFewSamples(usize),
    #[error("phase extraction succeeded at {ok} of {total} samples")]
    PhaseCoverage { ok: usize, total: usize },
}

/// Periodic window holding `n_per` copies of the wave cell.
#[derive(Debug, Clone)]
pub struct Window {
    pub wave: SpectralWave,
    pub n_per: usize,
    pub cell: usize,
    pub length: f64,
    pub base_u: Vec<f64>,
    pub base_w: Vec<f64>,
}

impl Window {
    pub fn new(wave: &SpectralWave, n_per: usize) -> Self {
        let cell = wave.n();
        let mut base_u = Vec::with_capacity(cell * n_per);
        let mut base_w = Vec::with_capacity(cell * n_per);
        for _ in 0..n_per {
            base_u.extend_from_slice(&wave.u);
            base_w.extend_from_slice(&wave.w);
        }
        Self { wave: wave.clone(), n_per, cell, length: wave.period * n_per as f64, base_u, base_w }
    }

    pub fn nx(&self) -> usize {
        self.base_u.len()
    }

    pub fn dx(&self) -> f64 {
        self.length / self.nx() as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.nx()).map(|j| j as f64 * self.dx()).collect()
    }

    /// The wave itself as a field state.
    pub fn steady_state(&self) -> FieldState {
        FieldState {
            t: 0.0,
            u: self.base_u.clone(),
            w: self.base_w.clone(),
            length: self.length,
            params: self.wave.params,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldState {
    pub t: f64,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub length: f64,
    pub params: ModelParams,
}

impl FieldState {
    pub fn dx(&self) -> f64 {
        self.length / self.u.len() as f64
    }

    /// Snapshot in a plain text table (`x u w` per row).
    pub fn to_text(&self) -> String {
        let mut s = String::from("# field-snapshot v1\n");
        let p = self.params;
        writeln!(s, "# t {:e}\n# length {:e}\n# a {:e}\n# gamma {:e}\n# epsilon {:e}\n# c {:e}\n# n {}", self.t, self.length, p.a, p.gamma, p.epsilon, p.c, self.u.len()).unwrap();
        for j in 0..self.u.len() {
            writeln!(s, "{:e} {:e} {:e}", j as f64 * self.dx(), self.u[j], self.w[j]).unwrap();
        }
        s
    }
}

/// `(e^z - 1)/z` and `(e^z - 1 - z)/z^2`.
fn phi12(z: C) -> (C, C) {
    if z.norm() < 1e-2 {
        // Taylor series, plenty of terms for |z| < 1e-2
        let mut p1 = C::new(0.0, 0.0);
        let mut p2 = C::new(0.0, 0.0);
        let mut term = C::new(1.0, 0.0);
        let mut fact = 1.0;
        for k in 0..10 {
            fact *= (k + 1) as f64;
            p1 += term / fact;
            p2 += term / (fact * (k + 2) as f64);
            term *= z;
        }
        (p1, p2)
    } else {
        let e = z.exp();
        ((e - 1.0) / z, (e - 1.0 - z) / (z * z))
    }
}

/// Exponential integrator for the perturbation on a fixed window.
pub struct Stepper {
    nx: usize,
    np: usize,
    dt: f64,
    params: ModelParams,
    eu: Vec<C>,
    ew: Vec<C>,
    p1u: Vec<C>,
    p2u: Vec<C>,
    p1w: Vec<C>,
    p2w: Vec<C>,
    /// `f'(U)`, `f''(U)/2` on the padded grid.
    d1: Vec<f64>,
    d2: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    pad_fwd: Arc<dyn Fft<f64>>,
    pad_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stepper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Stepper(nx = {}, dt = {})", self.nx, self.dt)
    }
}

/// Largest step accepted for the explicit part: `dt * Lip <= 1`, where
/// `Lip` bounds the explicit Jacobian over the wave's range widened by 0.1
/// (RK2 is stable on the real segment `[-2, 0]`).
pub fn stability_bound(params: &ModelParams, u_range: (f64, f64)) -> f64 {
    let a = params.a;
    let (lo, hi) = (u_range.0 - 0.1, u_range.1 + 0.1);
    let fp = |u: f64| (-3.0 * u * u + 2.0 * (1.0 + a) * u - a).abs();
    let umax = (1.0 + a) / 3.0;
    let mut lip = fp(lo).max(fp(hi));
    if umax > lo && umax < hi {
        lip = lip.max(fp(umax));
    }
    1.0 / (lip + params.epsilon.sqrt() + params.epsilon)
}

impl Stepper {
    pub fn new(window: &Window, dt: f64) -> Result<Self, PdeError> {
        let p = window.wave.params;
        let lo = window.base_u.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = window.base_u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bound = stability_bound(&p, (lo, hi));
        if !(dt > 0.0 && dt <= bound) {
            return Err(PdeError::StepTooLarge { dt, bound });
        }
        let nx = window.nx();
        let np = 2 * nx;
        let k = spectral::wavenumbers(nx, window.length);
        let mut eu = Vec::with_capacity(nx);
        let mut ew = Vec::with_capacity(nx);
        let (mut p1u, mut p2u, mut p1w, mut p2w) = (vec![], vec![], vec![], vec![]);
        for (j, &kk) in k.iter().enumerate() {
            let nyq = nx % 2 == 0 && j == nx / 2;
            let adv = if nyq { 0.0 } else { p.c * kk };
            let lu = C::new(-kk * kk, -adv) * dt;
            let lw = C::new(-p.epsilon * p.gamma, -adv) * dt;
            eu.push(lu.exp());
            ew.push(lw.exp());
            let (a, b) = phi12(lu);
            p1u.push(a * dt);
            p2u.push(b * dt);
            let (a, b) = phi12(lw);
            p1w.push(a * dt);
            p2w.push(b * dt);
        }
        let bu = spectral::resample(&window.base_u, np);
        let a = p.a;
        let d1 = bu.iter().map(|&u| -3.0 * u * u + 2.0 * (1.0 + a) * u - a).collect();
        let d2 = bu.iter().map(|&u| -3.0 * u + (1.0 + a)).collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            nx,
            np,
            dt,
            params: p,
            eu,
            ew,
            p1u,
            p2u,
            p1w,
            p2w,
            d1,
            d2,
            fwd: planner.plan_fft_forward(nx),
            inv: planner.plan_fft_inverse(nx),
            pad_fwd: planner.plan_fft_forward(np),
            pad_inv: planner.plan_fft_inverse(np),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn to_spectral(&self, x: &[f64]) -> Vec<C> {
        let mut b: Vec<C> = x.iter().map(|&v| C::new(v, 0.0)).collect();
        self.fwd.process(&mut b);
        let s = 1.0 / self.nx as f64;
        b.iter_mut().for_each(|z| *z *= s);
        b
    }

    fn to_physical(&self, hat: &[C]) -> Vec<f64> {
        let mut b = hat.to_vec();
        self.inv.process(&mut b);
        b.iter().map(|z| z.re).collect()
    }

    /// Explicit terms `(df(U; p) - q, eps p)` in Fourier space.
    fn nonlinear(&self, pu: &[C], pw: &[C]) -> (Vec<C>, Vec<C>) {
        let (nx, np) = (self.nx, self.np);
        let kmax = (nx - 1) / 2;
        let mut pad = vec![C::new(0.0, 0.0); np];
        for j in 0..nx {
            let m = spectral::mode_index(j, nx);
            if m.unsigned_abs() as usize > kmax {
                continue;
            }
            let slot = if m >= 0 { m as usize } else { (np as i64 + m) as usize };
            pad[slot] = pu[j];
        }
        self.pad_inv.process(&mut pad);
        for (i, z) in pad.iter_mut().enumerate() {
            let p = z.re;
            *z = C::new(p * (self.d1[i] + p * (self.d2[i] - p)), 0.0);
        }
        self.pad_fwd.process(&mut pad);
        let s = 1.0 / np as f64;
        let mut nu = vec![C::new(0.0, 0.0); nx];
        for (j, slot) in nu.iter_mut().enumerate() {
            let m = spectral::mode_index(j, nx);
            if m.unsigned_abs() as usize > kmax {
                continue;
            }
            let src = if m >= 0 { m as usize } else { (np as i64 + m) as usize };
            *slot = pad[src] * s - pw[j];
        }
        let nw = pu.iter().map(|z| z * self.params.epsilon).collect();
        (nu, nw)
    }

    /// One ETD2 (Cox-Matthews) step of the spectral perturbation.
    pub fn advance(&self, pu: &mut [C], pw: &mut [C]) {
        let (nu0, nw0) = self.nonlinear(pu, pw);
        let au: Vec<C> = (0..self.nx).map(|j| self.eu[j] * pu[j] + self.p1u[j] * nu0[j]).collect();
        let aw: Vec<C> = (0..self.nx).map(|j| self.ew[j] * pw[j] + self.p1w[j] * nw0[j]).collect();
        let (nu1, nw1) = self.nonlinear(&au, &aw);
        for j in 0..self.nx {
            pu[j] = au[j] + self.p2u[j] * (nu1[j] - nu0[j]);
            pw[j] = aw[j] + self.p2w[j] * (nw1[j] - nw0[j]);
        }
    }
}

fn all_finite(v: &[C]) -> bool {
    v.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Advances a full field state by `steps` steps of the stepper's `dt`.
pub fn step(state: &FieldState, window: &Window, stepper: &Stepper, steps: usize) -> Result<FieldState, PdeError> {
    if state.u.len() != window.nx() || state.w.len() != window.nx() {
        return Err(PdeError::Shape(state.u.len()));
    }
    let du: Vec<f64> = state.u.iter().zip(&window.base_u).map(|(a, b)| a - b).collect();
    let dw: Vec<f64> = state.w.iter().zip(&window.base_w).map(|(a, b)| a - b).collect();
    let mut pu = stepper.to_spectral(&du);
    let mut pw = stepper.to_spectral(&dw);
    for s in 0..steps {
        stepper.advance(&mut pu, &mut pw);
        if !all_finite(&pu) || !all_finite(&pw) {
            return Err(PdeError::NonFinite(state.t + (s + 1) as f64 * stepper.dt));
        }
    }
    let u = stepper.to_physical(&pu).iter().zip(&window.base_u).map(|(a, b)| a + b).collect();
    let w = stepper.to_physical(&pw).iter().zip(&window.base_w).map(|(a, b)| a + b).collect();
    Ok(FieldState { t: state.t + steps as f64 * stepper.dt, u, w, length: state.length, params: state.params })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Gaussian,
    CompactBump,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub shape: Shape,
    /// Peak amplitude.
    pub amplitude: f64,
    /// Centre as a fraction of the window length.
    pub center: f64,
    /// Gaussian standard deviation or bump half-width.
    pub width: f64,
    /// Weights on `(u, w)`.
    pub weights: [f64; 2],
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self { shape: Shape::Gaussian, amplitude: 1e-3, center: 0.5, width: 10.0, weights: [1.0, 0.0] }
    }
}

impl PerturbationSpec {
    fn profile(&self, x: f64, length: f64) -> f64 {
        let mut r = x - self.center * length;
        r -= length * (r / length).round();
        match self.shape {
            Shape::Gaussian => (-0.5 * (r / self.width).powi(2)).exp(),
            Shape::CompactBump => {
                let s = r / self.width;
                if s.abs() < 1.0 {
                    (1.0 - 1.0 / (1.0 - s * s)).exp()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn sample(&self, window: &Window) -> (Vec<f64>, Vec<f64>) {
        let xs = window.grid();
        let base: Vec<f64> = xs.iter().map(|&x| self.amplitude * self.profile(x, window.length)).collect();
        (
            base.iter().map(|v| v * self.weights[0]).collect(),
            base.iter().map(|v| v * self.weights[1]).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InitialNorms {
    pub l1: f64,
    pub l2: f64,
    pub h4: f64,
}

/// Discrete `L^2` norm of `(u, w)` samples.
pub fn l2_norm(u: &[f64], w: &[f64], dx: f64) -> f64 {
    (dx * u.iter().chain(w).map(|v| v * v).sum::<f64>()).sqrt()
}

/// Discrete `H^4` norm with Fourier weight `(1 + k^2)^4`.
pub fn h4_norm(u: &[f64], w: &[f64], length: f64) -> f64 {
    let n = u.len();
    let f = Fourier::new(n);
    let k = spectral::wavenumbers(n, length);
    let mut s = 0.0;
    for v in [u, w] {
        let hat = f.forward(v);
        s += hat.iter().zip(&k).map(|(z, kk)| (1.0 + kk * kk).powi(4) * z.norm_sqr()).sum::<f64>();
    }
    (length * s).sqrt()
}

fn spectral_h4(pu: &[C], pw: &[C], k: &[f64], length: f64) -> f64 {
    let s: f64 = pu
        .iter()
        .zip(pw)
        .zip(k)
        .map(|((a, b), kk)| (1.0 + kk * kk).powi(4) * (a.norm_sqr() + b.norm_sqr()))
        .sum();
    (length * s).sqrt()
}

fn spectral_l2(pu: &[C], pw: &[C], length: f64) -> f64 {
    (length * pu.iter().chain(pw).map(|z| z.norm_sqr()).sum::<f64>()).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOptions {
    pub dt: f64,
    pub t_end: f64,
    /// Interval between norm samples.
    pub sample_dt: f64,
    /// Number of log-spaced times with phase extraction (0 disables it).
    pub phase_samples: usize,
    /// Upper bound on the initial `H^4` norm.
    pub eps0: f64,
    pub min_cells: usize,
    /// Times at which full field snapshots are kept (rounded to the step).
    pub snapshots: Vec<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            dt: 0.2,
            t_end: 2000.0,
            sample_dt: 1.0,
            phase_samples: 40,
            eps0: 0.5,
            min_cells: 40,
            snapshots: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSample {
    pub t: f64,
    pub phi_l2: f64,
    pub phi_x_l2: f64,
    pub phi_t_l2: f64,
    pub v_l2: f64,
    pub vt_l2: f64,
    /// `max|U_x|` used in the mean-value bound.
    pub ux_sup: f64,
    pub flagged_cells: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionRun {
    pub t: Vec<f64>,
    /// `||U - U_bar||_{L^2}`.
    pub vt_l2: Vec<f64>,
    pub vt_h4: Vec<f64>,
    pub phase: Vec<PhaseSample>,
    pub initial: InitialNorms,
    pub eps_gamma: f64,
    pub blowup: Option<f64>,
    pub warnings: Vec<String>,
    /// Estimated time at which the perturbation reaches the window edge.
    pub wrap_time: f64,
    #[serde(skip)]
    pub snapshots: Vec<FieldState>,
}

impl EvolutionRun {
    pub fn csv(&self) -> String {
        let mut s = String::from("t,vtilde_l2,vtilde_h4\n");
        for j in 0..self.t.len() {
            writeln!(s, "{:e},{:e},{:e}", self.t[j], self.vt_l2[j], self.vt_h4[j]).unwrap();
        }
        s
    }

    pub fn phase_csv(&self) -> String {
        let mut s = String::from("t,phi_l2,phi_x_l2,phi_t_l2,v_l2,vtilde_l2,flagged_cells\n");
        for p in &self.phase {
            writeln!(s, "{:e},{:e},{:e},{:e},{:e},{:e},{}", p.t, p.phi_l2, p.phi_x_l2, p.phi_t_l2, p.v_l2, p.vt_l2, p.flagged_cells).unwrap();
        }
        s
    }
}

/// Time for the perturbation to travel from its support to the window
/// edge at group speed `|b|` plus diffusive spreading `sqrt(4 d t)`.
pub fn wrap_time(window: &Window, spec: &PerturbationSpec, b: f64, d: f64) -> f64 {
    let free = 0.5 * window.length - 3.0 * spec.width;
    if free <= 0.0 {
        return 0.0;
    }
    // solve |b| t + sqrt(4 d t) = free
    let (b, d) = (b.abs(), d.max(0.0));
    let s = if b > 0.0 {
        let r = (-(4.0 * d).sqrt() + (4.0 * d + 4.0 * b * free).sqrt()) / (2.0 * b);
        r * r
    } else if d > 0.0 {
        free * free / (4.0 * d)
    } else {
        f64::INFINITY
    };
    s
}

/// Evolves `U_bar + V0` and records norms; a blow-up stops the run and keeps
/// the samples gathered so far.
pub fn run_experiment(
    window: &Window,
    spec: &PerturbationSpec,
    opts: &RunOptions,
    tangency: Option<(f64, f64)>,
) -> Result<EvolutionRun, PdeError> {
    if window.n_per < opts.min_cells {
        return Err(PdeError::WindowTooSmall { min: opts.min_cells, got: window.n_per });
    }
    let stepper = Stepper::new(window, opts.dt)?;
    let (u0, w0) = spec.sample(window);
    let dx = window.dx();
    let initial = InitialNorms {
        l1: dx * u0.iter().chain(&w0).map(|v| v.abs()).sum::<f64>(),
        l2: l2_norm(&u0, &w0, dx),
        h4: h4_norm(&u0, &w0, window.length),
    };
    if initial.h4 > opts.eps0 {
        return Err(PdeError::TooLarge { norm: initial.h4, limit: opts.eps0 });
    }
    let mut pu = stepper.to_spectral(&u0);
    let mut pw = stepper.to_spectral(&w0);
    let k = spectral::wavenumbers(window.nx(), window.length);
    let p = window.wave.params;
    let wrap = tangency.map(|(b, d)| wrap_time(window, spec, b, d)).unwrap_or(f64::INFINITY);
    let mut warnings = Vec::new();
    if opts.t_end > wrap {
        warnings.push(format!("t_end {} exceeds the estimated wrap-around time {:.1}", opts.t_end, wrap));
    }

    let per_sample = ((opts.sample_dt / opts.dt).round() as usize).max(1);
    let total = (opts.t_end / opts.dt).round() as usize;
    let phase_steps = log_sample_steps(total, opts.phase_samples, 10.0 / opts.dt);
    let extractor = (opts.phase_samples > 0).then(|| PhaseExtractor::new(window));
    let phase_lag = ((1.0 / opts.dt).round() as usize).max(1);

    let mut run = EvolutionRun {
        t: vec![0.0],
        vt_l2: vec![spectral_l2(&pu, &pw, window.length)],
        vt_h4: vec![spectral_h4(&pu, &pw, &k, window.length)],
        phase: Vec::new(),
        initial,
        eps_gamma: p.epsilon * p.gamma,
        blowup: None,
        warnings,
        wrap_time: wrap,
        snapshots: Vec::new(),
    };
    let snap_steps: Vec<usize> = opts.snapshots.iter().map(|t| (t / opts.dt).round() as usize).collect();
    if snap_steps.contains(&0) {
        run.snapshots.push(field_from(&stepper, window, &pu, &pw, 0.0));
    }
    let mut pending: Option<(f64, Vec<f64>, FieldState)> = None;
    let mut next_phase = 0usize;
    for s in 1..=total {
        stepper.advance(&mut pu, &mut pw);
        let t = s as f64 * opts.dt;
        if !all_finite(&pu) || !all_finite(&pw) {
            run.blowup = Some(t);
            run.warnings.push(format!("non-finite field at t = {t}"));
            break;
        }
        if s % per_sample == 0 {
            run.t.push(t);
            run.vt_l2.push(spectral_l2(&pu, &pw, window.length));
            run.vt_h4.push(spectral_h4(&pu, &pw, &k, window.length));
        }
        if snap_steps.contains(&s) {
            run.snapshots.push(field_from(&stepper, window, &pu, &pw, t));
        }
        if let Some(ex) = &extractor {
            let want = next_phase < phase_steps.len() && s == phase_steps[next_phase];
            let lagged = pending.as_ref().is_some_and(|(t0, _, _)| ((t - t0) / opts.dt).round() as usize == phase_lag);
            if want || lagged {
                let st = field_from(&stepper, window, &pu, &pw, t);
                if lagged {
                    let (t0, phi0, st0) = pending.take().unwrap();
                    let res = ex.extract(&st);
                    let phi_t: Vec<f64> = res.phi.iter().zip(&phi0).map(|(a, b)| (a - b) / (t - t0)).collect();
                    let first = ex.extract(&st0);
                    run.phase.push(ex.sample(&st0, &first, &phi_t));
                    if first.flagged > 0 {
                        run.warnings.push(format!("phase extraction flagged {} cells at t = {t0}", first.flagged));
                    }
                }
                if want {
                    let phi = ex.extract(&st).phi;
                    pending = Some((t, phi, st));
                    next_phase += 1;
                }
            }
        }
    }
    Ok(run)
}

fn field_from(stepper: &Stepper, window: &Window, pu: &[C], pw: &[C], t: f64) -> FieldState {
    let u = stepper.to_physical(pu).iter().zip(&window.base_u).map(|(a, b)| a + b).collect();
    let w = stepper.to_physical(pw).iter().zip(&window.base_w).map(|(a, b)| a + b).collect();
    FieldState { t, u, w, length: window.length, params: window.wave.params }
}

/// Roughly log-spaced distinct step indices in `[start, 0.95 total]`.
fn log_sample_steps(total: usize, count: usize, start: f64) -> Vec<usize> {
    if count == 0 || total < 2 {
        return Vec::new();
    }
    let lo = start.max(1.0).ln();
    let hi = (0.95 * total as f64).max(start + 1.0).ln();
    let mut v: Vec<usize> = (0..count)
        .map(|i| {
            let f = if count == 1 { 1.0 } else { i as f64 / (count - 1) as f64 };
            (lo + f * (hi - lo)).exp().round() as usize
        })
        .filter(|&s| s >= 1 && s < total)
        .collect();
    v.dedup();
    v
}

/// Phase field on the coarse grid with the fine-grid interpolant.
#[derive(Debug, Clone)]
pub struct PhaseField {
    pub coarse_x: Vec<f64>,
    pub coarse: Vec<f64>,
    pub phi: Vec<f64>,
    pub flagged: usize,
}

/// Local translation fit: for each coarse point solve
/// `<U(x - phi) - U_bar(x), U_bar'(x)>_omega = 0`, written after the change
/// of variables `y = x - phi` so that only the wave is ever shifted.
#[derive(Debug, Clone)]
pub struct PhaseExtractor {
    period: f64,
    cell: usize,
    n_per: usize,
    per_cell: usize,
    hat_u: Vec<C>,
    hat_w: Vec<C>,
    kcell: Vec<f64>,
    fourier: Fourier,
}

/// Raised-cosine window of half-width `h`, together with its derivative.
fn bump(r: f64, h: f64) -> (f64, f64) {
    if r.abs() >= h {
        return (0.0, 0.0);
    }
    let a = std::f64::consts::PI * r / (2.0 * h);
    (a.cos().powi(2), -(2.0 * a).sin() * std::f64::consts::PI / (2.0 * h))
}

impl PhaseExtractor {
    pub fn new(window: &Window) -> Self {
        let f = Fourier::new(window.cell);
        Self {
            period: window.wave.period,
            cell: window.cell,
            n_per: window.n_per,
            per_cell: 8,
            hat_u: f.forward(&window.wave.u),
            hat_w: f.forward(&window.wave.w),
            kcell: spectral::wavenumbers(window.cell, window.wave.period),
            fourier: f,
        }
    }

    /// Wave shifted by `phi` and its first two derivatives on one cell,
    /// for both components.
    fn shifted(&self, phi: f64) -> [[Vec<f64>; 3]; 2] {
        let mk = |hat: &Vec<C>| -> [Vec<f64>; 3] {
            let mut out: [Vec<f64>; 3] = Default::default();
            for (order, slot) in out.iter_mut().enumerate() {
                let v: Vec<C> = hat
                    .iter()
                    .zip(&self.kcell)
                    .enumerate()
                    .map(|(j, (z, &k))| {
                        let nyq = self.cell % 2 == 0 && j == self.cell / 2;
                        let k = if nyq { 0.0 } else { k };
                        z * C::from_polar(1.0, k * phi) * C::new(0.0, k).powu(order as u32)
                    })
                    .collect();
                *slot = self.fourier.inverse_real(&v);
            }
            out
        };
        [mk(&self.hat_u), mk(&self.hat_w)]
    }

    /// `g(phi)` and `g'(phi)` for the window centred at `xc`.
    fn residual(&self, state: &FieldState, xc: f64, phi: f64) -> (f64, f64) {
        let nx = state.u.len();
        let dx = state.length / nx as f64;
        let h = self.period;
        let sh = self.shifted(phi);
        let (mut g, mut dg) = (0.0, 0.0);
        let j0 = ((xc - phi - h) / dx).floor() as i64;
        let j1 = ((xc - phi + h) / dx).ceil() as i64;
        for j in j0..=j1 {
            let y = j as f64 * dx;
            let (om, dom) = bump(y + phi - xc, h);
            if om == 0.0 && dom == 0.0 {
                continue;
            }
            let jw = j.rem_euclid(nx as i64) as usize;
            let jc = j.rem_euclid(self.cell as i64) as usize;
            for (c, field) in [&state.u, &state.w].into_iter().enumerate() {
                let diff = field[jw] - sh[c][0][jc];
                let d1 = sh[c][1][jc];
                let d2 = sh[c][2][jc];
                g += om * diff * d1;
                dg += dom * diff * d1 + om * (-d1 * d1 + diff * d2);
            }
        }
        (g * dx, dg * dx)
    }

    fn solve_cell(&self, state: &FieldState, xc: f64, guess: f64) -> Option<f64> {
        let mut phi = guess;
        let limit = 0.25 * self.period;
        for _ in 0..40 {
            let (g, dg) = self.residual(state, xc, phi);
            if dg >= 0.0 || !dg.is_finite() {
                return None;
            }
            let mut step = -g / dg;
            // damp steps larger than a tenth of a cell
            let cap = 0.1 * self.period;
            if step.abs() > cap {
                step = step.signum() * cap;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..20 {
                let trial = phi + t * step;
                if self.residual(state, xc, trial).0.abs() < g.abs() || g.abs() < 1e-15 {
                    phi = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || phi.abs() > limit {
                return None;
            }
            if (t * step).abs() < 1e-13 * (1.0 + phi.abs()) {
                return Some(phi);
            }
        }
        None
    }

    pub fn extract(&self, state: &FieldState) -> PhaseField {
        let m = self.per_cell * self.n_per;
        let hx = state.length / m as f64;
        let coarse_x: Vec<f64> = (0..m).map(|j| j as f64 * hx).collect();
        let mut coarse = vec![f64::NAN; m];
        let mut prev = 0.0;
        for (j, &xc) in coarse_x.iter().enumerate() {
            if let Some(p) = self.solve_cell(state, xc, prev).or_else(|| self.solve_cell(state, xc, 0.0)) {
                coarse[j] = p;
                prev = p;
            }
        }
        let flagged = coarse.iter().filter(|v| v.is_nan()).count();
        if flagged > 0 && flagged < m {
            fill_gaps(&mut coarse);
        } else if flagged == m {
            coarse.iter_mut().for_each(|v| *v = 0.0);
        }
        let phi = spectral::resample(&coarse, state.u.len());
        PhaseField { coarse_x, coarse, phi, flagged }
    }

    fn sample(&self, state: &FieldState, pf: &PhaseField, phi_t: &[f64]) -> PhaseSample {
        let nx = state.u.len();
        let dx = state.length / nx as f64;
        let f = Fourier::new(nx);
        let phi_x = spectral::derivative(&f, &pf.phi, state.length, 1);
        let tiled = self.tiled_wave(nx);
        let v = modulated_perturbation(state, &tiled, &pf.phi);
        let vt_u: Vec<f64> = state.u.iter().zip(&tiled.0).map(|(a, b)| a - b).collect();
        let vt_w: Vec<f64> = state.w.iter().zip(&tiled.1).map(|(a, b)| a - b).collect();
        let ux = spectral::derivative(&f, &state.u, state.length, 1);
        let wx = spectral::derivative(&f, &state.w, state.length, 1);
        let norm = |x: &[f64]| (dx * x.iter().map(|v| v * v).sum::<f64>()).sqrt();
        PhaseSample {
            t: state.t,
            phi_l2: norm(&pf.phi),
            phi_x_l2: norm(&phi_x),
            phi_t_l2: norm(phi_t),
            v_l2: l2_norm(&v.0, &v.1, dx),
            vt_l2: l2_norm(&vt_u, &vt_w, dx),
            ux_sup: ux.iter().chain(&wx).fold(0.0f64, |m, v| m.max(v.abs())),
            flagged_cells: pf.flagged,
        }
    }

    fn tiled_wave(&self, nx: usize) -> (Vec<f64>, Vec<f64>) {
        let u = self.fourier.inverse_real(&self.hat_u);
        let w = self.fourier.inverse_real(&self.hat_w);
        ((0..nx).map(|j| u[j % self.cell]).collect(), (0..nx).map(|j| w[j % self.cell]).collect())
    }
}

/// Linear interpolation of NaN gaps on a periodic array.
fn fill_gaps(v: &mut [f64]) {
    let n = v.len();
    let good: Vec<usize> = (0..n).filter(|&j| !v[j].is_nan()).collect();
    for j in 0..n {
        if !v[j].is_nan() {
            continue;
        }
        let after = good.iter().copied().find(|&g| g > j).unwrap_or(good[0] + n);
        let before = good.iter().copied().rev().find(|&g| g < j).map(|g| g as i64).unwrap_or(*good.last().unwrap() as i64 - n as i64);
        let (va, vb) = (v[after % n], v[before.rem_euclid(n as i64) as usize]);
        let s = (j as i64 - before) as f64 / (after as i64 - before) as f64;
        v[j] = vb + s * (va - vb);
    }
}

/// Periodic Lagrange interpolation with `order` nodes at `x`.
pub fn interpolate(values: &[f64], dx: f64, x: f64, order: usize) -> f64 {
    let n = values.len() as i64;
    let s = x / dx;
    let base = s.floor() as i64 - (order as i64 / 2 - 1);
    let mut acc = 0.0;
    for i in 0..order as i64 {
        let xi = (base + i) as f64;
        let mut w = 1.0;
        for j in 0..order as i64 {
            if j != i {
                let xj = (base + j) as f64;
                w *= (s - xj) / (xi - xj);
            }
        }
        acc += w * values[(base + i).rem_euclid(n) as usize];
    }
    acc
}

/// `V(x) = U(x - phi(x)) - U_bar(x)` by 16-point Lagrange interpolation.
pub fn modulated_perturbation(state: &FieldState, wave: &(Vec<f64>, Vec<f64>), phi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dx = state.dx();
    let n = state.u.len();
    let mut vu = Vec::with_capacity(n);
    let mut vw = Vec::with_capacity(n);
    for j in 0..n {
        let x = j as f64 * dx - phi[j];
        vu.push(interpolate(&state.u, dx, x, 16) - wave.0[j]);
        vw.push(interpolate(&state.w, dx, x, 16) - wave.1[j]);
    }
    (vu, vw)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecayFit {
    /// Exponent `p` in `y ~ A (1 + t)^p`.
    pub exponent: f64,
    /// 95% half-width of the exponent.
    pub ci: f64,
    pub prefactor: f64,
    pub samples: usize,
    pub t_min: f64,
    pub t_max: f64,
}

/// Least-squares fit of `ln y` against `ln(1 + t)` on `t in [t_min, t_max]`.
pub fn fit_decay(t: &[f64], y: &[f64], t_min: f64, t_max: f64) -> Result<DecayFit, PdeError> {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(y)
        .filter(|(tt, yy)| **tt >= t_min && **tt <= t_max && **yy > 0.0 && yy.is_finite())
        .map(|(tt, yy)| ((1.0 + tt).ln(), yy.ln()))
        .collect();
    let n = pts.len();
    if n < 3 {
        return Err(PdeError::TooFewSamples(n));
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = pts.iter().map(|p| (p.1 - icpt - slope * p.0).powi(2)).sum();
    let se = (rss / (nf - 2.0).max(1.0) / sxx).sqrt();
    Ok(DecayFit { exponent: slope, ci: 1.96 * se, prefactor: icpt.exp(), samples: n, t_min, t_max })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayReport {
    /// Fit window guards: `t >= 10`, last 10% of the run excluded.
    pub t_min: f64,
    pub t_max: f64,
    pub vtilde_l2: DecayFit,
    pub v_l2: Option<DecayFit>,
    pub phi_l2: Option<DecayFit>,
    pub phi_x_l2: Option<DecayFit>,
    pub phi_t_l2: Option<DecayFit>,
    /// Largest violation of the mean-value bound relating the two perturbations.
    pub mean_value_excess: f64,
}

pub fn modulated_decay_report(run: &EvolutionRun) -> Result<DecayReport, PdeError> {
    let t_end = *run.t.last().unwrap_or(&0.0);
    let (t_min, t_max) = (10.0, 0.9 * t_end);
    let vtilde_l2 = fit_decay(&run.t, &run.vt_l2, t_min, t_max)?;
    let total = run.phase.len();
    let ok = run.phase.iter().filter(|p| p.flagged_cells == 0).count();
    let with_phase = total > 0;
    if with_phase && (ok as f64) < 0.9 * total as f64 {
        return Err(PdeError::PhaseCoverage { ok, total });
    }
    let series = |f: fn(&PhaseSample) -> f64| -> Option<DecayFit> {
        if !with_phase {
            return None;
        }
        let t: Vec<f64> = run.phase.iter().map(|p| p.t).collect();
        let y: Vec<f64> = run.phase.iter().map(f).collect();
        fit_decay(&t, &y, t_min, t_max).ok()
    };
    let mean_value_excess = run
        .phase
        .iter()
        .map(|p| p.vt_l2 - (p.v_l2 + p.ux_sup * p.phi_l2))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(DecayReport {
        t_min,
        t_max,
        vtilde_l2,
        v_l2: series(|p| p.v_l2),
        phi_l2: series(|p| p.phi_l2),
        phi_x_l2: series(|p| p.phi_x_l2),
        phi_t_l2: series(|p| p.phi_t_l2),
        mean_value_excess,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DampingLedger {
    /// Minimal constant making the integrated inequality hold up to each sample.
    pub c_required: Vec<f64>,
    pub c_uniform: f64,
    /// The required constant stops growing over the second half of the run.
    pub certified: bool,
    /// First time the required constant exceeds the supplied bound.
    pub first_violation: Option<f64>,
}

/// Evaluates `||V(t)||_{H4}^2 <= e^{-eps gamma t} ||V0||_{H4}^2 + C int_0^t
/// e^{-eps gamma (t-s)} ||V(s)||_{L2}^2 ds` along the recorded samples.
pub fn damping_check(run: &EvolutionRun, bound: Option<f64>) -> DampingLedger {
    let n = run.t.len();
    let k = run.eps_gamma;
    let h0 = run.vt_h4.first().copied().unwrap_or(0.0).powi(2);
    let mut integral = 0.0;
    let mut c_required = Vec::with_capacity(n);
    let mut running = 0.0f64;
    let mut first_violation = None;
    for j in 0..n {
        if j > 0 {
            let dt = run.t[j] - run.t[j - 1];
            let decay = (-k * dt).exp();
            // trapezoid for the convolution with the exponential kernel
            integral = integral * decay + 0.5 * dt * (run.vt_l2[j].powi(2) + decay * run.vt_l2[j - 1].powi(2));
        }
        let excess = run.vt_h4[j].powi(2) - (-k * run.t[j]).exp() * h0;
        let need = if excess <= 0.0 {
            0.0
        } else if integral > 0.0 {
            excess / integral
        } else {
            f64::INFINITY
        };
        running = running.max(need);
        c_required.push(running);
        if let Some(b) = bound {
            if first_violation.is_none() && need > b {
                first_violation = Some(run.t[j]);
            }
        }
    }
    let c_uniform = running;
    let half = c_required.get(n / 2).copied().unwrap_or(0.0);
    let certified = c_uniform.is_finite() && c_uniform <= 1.05 * half.max(f64::MIN_POSITIVE) || c_uniform == 0.0;
    DampingLedger { c_required, c_uniform, certified, first_violation }
}
