//! Bloch operators of the periodic wave by Hill's method, spectral sweeps
//! over the Brillouin zone and the discrete Bloch transform.

use std::fmt::Write as _;

use faer::linalg::solvers::Solve;
use faer::Mat;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evans::{self, EvansError, TangencyFit};
use crate::model::reaction_deriv;
use crate::spectral::{self, Fourier};
use crate::wave::SpectralWave;

type C = Complex64;

#[derive(Debug, Error)]
pub enum BlochError {
    #[error("wave unresolved at K = {k}: Fourier tail {tail:e}")]
    Unresolved { k: usize, tail: f64 },
    #[error("eigenvalue computation failed at xi = {0}")]
    Eigen(f64),
    #[error("xi count must be odd and at least 33, got {0}")]
    XiCount(usize),
    #[error("no eigenvalue inside the critical disk at xi = {0}")]
    NoCritical(f64),
    #[error("bloch window too small: tail mass {0:e} > 1e-8")]
    WindowTooSmall(f64),
    #[error("need at least 3 sweeps for the scaling study, got {0}")]
    TooFewSweeps(usize),
    #[error(transparent)]
    Evans(#[from] EvansError),
}

/// Discretised `L_xi` on modes `-K..=K` for u and w (u block first).
#[derive(Debug, Clone)]
pub struct BlochOperatorDisc {
    pub xi: f64,
    pub k: usize,
    pub matrix: Mat<C>,
}

impl BlochOperatorDisc {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// Mode index of row `r` within a block.
    pub fn mode(&self, r: usize) -> i64 {
        (r % (2 * self.k + 1)) as i64 - self.k as i64
    }

    pub fn apply(&self, v: &[C]) -> Vec<C> {
        let n = self.size();
        (0..n).map(|i| (0..n).map(|j| self.matrix[(i, j)] * v[j]).sum()).collect()
    }
}

/// Fourier coefficients `F_n`, |n| <= 2K, of `f'(u(x))` (index `n + 2K`).
fn potential_coefficients(wave: &SpectralWave, k: usize) -> Vec<C> {
    let m = spectral::smooth_odd_at_least(4 * k + 1).max(wave.n());
    let u = spectral::resample(&wave.u, m);
    let fp: Vec<f64> = u.iter().map(|&v| reaction_deriv(v, wave.params.a)).collect();
    let hat = Fourier::new(m).forward(&fp);
    let kk = 2 * k as i64;
    (-kk..=kk)
        .map(|n| {
            if n.unsigned_abs() as usize > (m - 1) / 2 {
                C::new(0.0, 0.0)
            } else {
                hat[if n >= 0 { n as usize } else { (m as i64 + n) as usize }]
            }
        })
        .collect()
}

/// Fourier tail of the wave at mode `k` relative to its largest coefficient
/// (mean included, so constant states have zero tail).
pub fn tail_at(wave: &SpectralWave, k: usize) -> f64 {
    let n = wave.n();
    let (uh, wh) = wave.coefficients();
    let mut top = 0.0f64;
    let mut tail = 0.0f64;
    for hat in [&uh, &wh] {
        for (j, z) in hat.iter().enumerate() {
            let m = spectral::mode_index(j, n).unsigned_abs() as usize;
            top = top.max(z.norm());
            if m > 0 && m >= k {
                tail = tail.max(z.norm());
            }
        }
    }
    // modes beyond the wave's own grid are zero
    if k > (n - 1) / 2 {
        return 0.0;
    }
    if top == 0.0 {
        return 0.0;
    }
    tail / top
}

pub fn assemble_bloch(xi: f64, wave: &SpectralWave, k: usize) -> Result<BlochOperatorDisc, BlochError> {
    let tail = tail_at(wave, k);
    if tail > 1e-10 {
        return Err(BlochError::Unresolved { k, tail });
    }
    let f = potential_coefficients(wave, k);
    Ok(assemble_with(xi, wave, k, &f))
}

fn assemble_with(xi: f64, wave: &SpectralWave, k: usize, f: &[C]) -> BlochOperatorDisc {
    let nb = 2 * k + 1;
    let p = wave.params;
    let base = 2.0 * std::f64::consts::PI / wave.period;
    let mut m = Mat::<C>::zeros(2 * nb, 2 * nb);
    for r in 0..nb {
        let kr = r as i64 - k as i64;
        let q = base * kr as f64 + xi;
        for s in 0..nb {
            let ks = s as i64 - k as i64;
            m[(r, s)] = f[(kr - ks + 2 * k as i64) as usize];
        }
        m[(r, r)] += C::new(-q * q, -p.c * q);
        m[(r, nb + r)] = C::new(-1.0, 0.0);
        m[(nb + r, r)] = C::new(p.epsilon, 0.0);
        m[(nb + r, nb + r)] = C::new(-p.epsilon * p.gamma, -p.c * q);
    }
    BlochOperatorDisc { xi, k, matrix: m }
}

pub fn eigenvalues(op: &BlochOperatorDisc) -> Result<Vec<C>, BlochError> {
    let mut ev = op.matrix.eigenvalues().map_err(|_| BlochError::Eigen(op.xi))?;
    ev.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap());
    Ok(ev)
}

/// Eigenvalue of largest real part inside the disk `|lambda| <= radius` at a
/// single Bloch wavenumber.
pub fn critical_eigenvalue(wave: &SpectralWave, k: usize, xi: f64, radius: f64) -> Result<C, BlochError> {
    let op = assemble_bloch(xi, wave, k)?;
    eigenvalues(&op)?
        .into_iter()
        .filter(|z| z.norm() <= radius)
        .max_by(|a, b| a.re.partial_cmp(&b.re).unwrap())
        .ok_or(BlochError::NoCritical(xi))
}

/// Eigenvector for an (approximate) eigenvalue by inverse iteration.
pub fn eigenvector(op: &BlochOperatorDisc, lambda: C) -> Vec<C> {
    let n = op.size();
    let shift = lambda + C::new(1e-13 * (1.0 + lambda.norm()), 0.0);
    let mut a = op.matrix.clone();
    for i in 0..n {
        a[(i, i)] -= shift;
    }
    let lu = a.partial_piv_lu();
    let mut v = Mat::<C>::from_fn(n, 1, |i, _| C::new(1.0 + 0.01 * i as f64, 0.3));
    for _ in 0..3 {
        v = lu.solve(&v);
        let s: f64 = (0..n).map(|i| v[(i, 0)].norm_sqr()).sum::<f64>().sqrt();
        for i in 0..n {
            v[(i, 0)] /= s;
        }
    }
    (0..n).map(|i| v[(i, 0)]).collect()
}

/// Fourier vector of `U'` in the Bloch basis with `K` modes.
pub fn translation_mode(wave: &SpectralWave, k: usize) -> Vec<C> {
    let n = wave.n();
    let (uh, wh) = wave.coefficients();
    let base = 2.0 * std::f64::consts::PI / wave.period;
    let nb = 2 * k + 1;
    let mut v = vec![C::new(0.0, 0.0); 2 * nb];
    for r in 0..nb {
        let m = r as i64 - k as i64;
        if m.unsigned_abs() as usize > (n - 1) / 2 {
            continue;
        }
        let j = if m >= 0 { m as usize } else { (n as i64 + m) as usize };
        let ik = C::new(0.0, base * m as f64);
        v[r] = ik * uh[j];
        v[nb + r] = ik * wh[j];
    }
    v
}

fn vnorm(v: &[C]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn inner(a: &[C], b: &[C]) -> C {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepOptions {
    pub xi_count: usize,
    /// Number of modes; `None` uses the wave's own resolution.
    pub k: Option<usize>,
    /// Critical disk radius as a fraction of the spectral gap at xi = 0.
    pub r1_fraction: f64,
    /// Number of exponentially small eigenvalues of `L_0` (one per interface)
    /// excluded when measuring the spectral gap.
    pub cluster: usize,
    pub fit_max_residual: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { xi_count: 33, k: None, r1_fraction: 0.1, cluster: 2, fit_max_residual: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certification {
    /// Spectrum in the open left half-plane apart from the zero eigenvalue.
    pub cond1: bool,
    /// `Re sigma(L_xi) <= -theta xi^2` with `theta > 0`.
    pub cond2: bool,
    /// Simple zero eigenvalue of `L_0` with eigenfunction `U'`.
    pub cond3: bool,
    /// Largest real part of the non-critical spectrum over the grid (= -delta_0).
    pub max_re_noncritical: f64,
    pub theta: f64,
    /// `min_{|xi| >= xi1} -Re sigma(L_xi)` with `xi1 = pi/(2T)`.
    pub delta1: f64,
    pub xi1: f64,
    pub zero_eigenvalue: C,
    /// Distance from 0 to the rest of the spectrum of `L_0`.
    pub zero_gap: f64,
    /// Distance from 0 to the spectrum of `L_0` outside the interface cluster.
    pub bulk_gap: f64,
    pub eigenfunction_angle: f64,
    /// `||L_0 U'|| / ||U'||`.
    pub translation_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralSweep {
    pub period: f64,
    pub k: usize,
    pub xi: Vec<f64>,
    /// Eigenvalues with `Re > -1` at every xi, sorted by real part (descending).
    pub leading: Vec<Vec<C>>,
    pub critical: Vec<C>,
    /// `||Phi_xi - U'|| / ||U'||` with `<U', Phi_xi> = ||U'||^2`.
    pub eigenfunction_gap: Vec<f64>,
    /// Grid indices where max-Re selection and nearest-neighbour pairing disagree.
    pub jumps: Vec<usize>,
    pub radius: f64,
    pub fit: Option<TangencyFit>,
    pub certification: Certification,
    /// `|lambda_c(-xi) - conj(lambda_c(xi))|` maximised over the grid.
    pub conjugate_defect: f64,
    /// Least-squares slope of `||Phi_xi - U'|| / ||U'||` against `|xi|` on `|xi| <= pi/(2T)`.
    pub eigenfunction_slope: f64,
}

impl SpectralSweep {
    pub fn max_critical(&self) -> f64 {
        self.critical.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Critical eigenvalue at the grid point nearest to `xi`.
    pub fn critical_at(&self, xi: f64) -> (f64, C) {
        let j = self
            .xi
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - xi).abs().partial_cmp(&(b.1 - xi).abs()).unwrap())
            .unwrap()
            .0;
        (self.xi[j], self.critical[j])
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("xi,re_lambda_c,im_lambda_c,spectral_gap\n");
        for (j, x) in self.xi.iter().enumerate() {
            let gap = self.leading[j]
                .iter()
                .filter(|z| (**z - self.critical[j]).norm() > 0.0)
                .map(|z| -z.re)
                .fold(f64::INFINITY, f64::min);
            writeln!(s, "{:e},{:e},{:e},{:e}", x, self.critical[j].re, self.critical[j].im, gap).unwrap();
        }
        s
    }
}

struct XiResult {
    values: Vec<C>,
    all_max_re: f64,
}

fn solve_xi(op: &BlochOperatorDisc) -> Result<XiResult, BlochError> {
    let ev = eigenvalues(op)?;
    let all_max_re = ev[0].re;
    Ok(XiResult { values: ev.into_iter().filter(|z| z.re > -1.0).collect(), all_max_re })
}

pub fn sweep(wave: &SpectralWave, opts: &SweepOptions) -> Result<SpectralSweep, BlochError> {
    if opts.xi_count < 33 || opts.xi_count % 2 == 0 {
        return Err(BlochError::XiCount(opts.xi_count));
    }
    let k = opts.k.unwrap_or((wave.n() - 1) / 2);
    let tail = tail_at(wave, k);
    if tail > 1e-10 {
        return Err(BlochError::Unresolved { k, tail });
    }
    let t = wave.period;
    let xi = evans::xi_grid(t, opts.xi_count)?;
    let f = potential_coefficients(wave, k);
    let results: Vec<Result<(BlochOperatorDisc, XiResult), BlochError>> = xi
        .par_iter()
        .map(|&x| {
            let op = assemble_with(x, wave, k, &f);
            let r = solve_xi(&op)?;
            Ok((op, r))
        })
        .collect();
    let mut ops = Vec::with_capacity(xi.len());
    let mut res = Vec::with_capacity(xi.len());
    for r in results {
        let (op, x) = r?;
        ops.push(op);
        res.push(x);
    }
    let mid = (xi.len() - 1) / 2;
    // zero eigenvalue and gap at xi = 0
    let mut by_mod: Vec<C> = res[mid].values.clone();
    by_mod.sort_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap());
    let zero = by_mod[0];
    let zero_gap = by_mod.get(1).map(|z| z.norm()).unwrap_or(f64::INFINITY);
    let bulk_gap = by_mod.get(opts.cluster.max(1)).map(|z| z.norm()).unwrap_or(f64::INFINITY);
    let radius = opts.r1_fraction * bulk_gap;

    // critical eigenvalue: max Re inside the disk, compared with continuation
    let mut critical = vec![C::new(0.0, 0.0); xi.len()];
    let mut jumps = Vec::new();
    critical[mid] = zero;
    for dir in [1i64, -1] {
        let mut prev = zero;
        let mut j = mid as i64 + dir;
        while j >= 0 && (j as usize) < xi.len() {
            let ju = j as usize;
            let vals = &res[ju].values;
            let inside: Vec<C> = vals.iter().copied().filter(|z| z.norm() <= radius).collect();
            let pick = inside
                .iter()
                .copied()
                .max_by(|a, b| a.re.partial_cmp(&b.re).unwrap())
                .ok_or(BlochError::NoCritical(xi[ju]))?;
            let near = vals
                .iter()
                .copied()
                .min_by(|a, b| (*a - prev).norm().partial_cmp(&(*b - prev).norm()).unwrap())
                .unwrap();
            if near != pick {
                jumps.push(ju);
            }
            critical[ju] = pick;
            prev = pick;
            j += dir;
        }
    }

    // eigenfunctions
    let up = translation_mode(wave, k);
    let up_norm = vnorm(&up);
    let phis: Vec<f64> = ops
        .par_iter()
        .zip(critical.par_iter())
        .map(|(op, &lam)| {
            let v = eigenvector(op, lam);
            let s = inner(&up, &v);
            let scale = C::new(up_norm * up_norm, 0.0) / s;
            let d: Vec<C> = v.iter().zip(&up).map(|(a, b)| a * scale - b).collect();
            vnorm(&d) / up_norm
        })
        .collect();
    let eigenfunction_angle = {
        let v = eigenvector(&ops[mid], zero);
        let c = inner(&up, &v).norm() / (up_norm * vnorm(&v));
        c.min(1.0).acos()
    };
    let translation_residual = vnorm(&ops[mid].apply(&up)) / up_norm;

    // certification
    let mut max_re_noncritical = f64::NEG_INFINITY;
    let mut theta = f64::INFINITY;
    let xi1 = std::f64::consts::PI / (2.0 * t);
    let mut delta1 = f64::INFINITY;
    let mut crit_ok = true;
    for (j, r) in res.iter().enumerate() {
        let mut skipped = false;
        for z in &r.values {
            if !skipped && *z == critical[j] {
                skipped = true;
                continue;
            }
            max_re_noncritical = max_re_noncritical.max(z.re);
        }
        if j != mid {
            theta = theta.min(-r.all_max_re / (xi[j] * xi[j]));
            if critical[j].re >= 0.0 {
                crit_ok = false;
            }
        }
        if xi[j].abs() >= xi1 * (1.0 - 1e-12) {
            delta1 = delta1.min(-r.all_max_re);
        }
    }
    let cond3 = zero.norm() <= 1e-8 && eigenfunction_angle <= 1e-4 && zero_gap >= 1e3 * zero.norm();
    let cond1 = max_re_noncritical < 0.0 && crit_ok;
    let cond2 = theta > 0.0 && theta.is_finite();

    let fit = evans::tangency_coefficients(&xi, &critical, t, opts.fit_max_residual).ok();
    let conjugate_defect = (0..xi.len())
        .map(|j| (critical[xi.len() - 1 - j] - critical[j].conj()).norm())
        .fold(0.0, f64::max);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (j, x) in xi.iter().enumerate() {
        if j != mid && x.abs() <= xi1 * (1.0 + 1e-12) {
            sxy += x.abs() * phis[j];
            sxx += x * x;
        }
    }
    Ok(SpectralSweep {
        period: t,
        k,
        xi,
        leading: res.into_iter().map(|r| r.values).collect(),
        critical,
        eigenfunction_gap: phis,
        jumps,
        radius,
        fit,
        certification: Certification {
            cond1,
            cond2,
            cond3,
            max_re_noncritical,
            theta,
            delta1,
            xi1,
            zero_eigenvalue: zero,
            zero_gap,
            bulk_gap,
            eigenfunction_angle,
            translation_residual,
        },
        conjugate_defect,
        eigenfunction_slope: sxy / sxx,
    })
}

/// Hausdorff distance between two eigenvalue sets restricted to `Re > floor`.
pub fn set_distance(a: &[C], b: &[C], floor: f64) -> f64 {
    let one_way = |p: &[C], q: &[C]| -> f64 {
        p.iter()
            .filter(|z| z.re > floor)
            .map(|z| q.iter().map(|w| (z - w).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

/// Discrete Bloch transform of window samples: `out[j][x]` for the `j`-th
/// Bloch frequency `xi_j = 2 pi (j - n_per/2) / (n_per T)` (ascending),
/// following `g_check(xi, x) = T sum_n g(x + nT) e^{-i xi (x + nT)}`.
pub fn bloch_transform(g: &[C], n_per: usize, period: f64) -> (Vec<f64>, Vec<Vec<C>>) {
    let n_cell = g.len() / n_per;
    let dx = period / n_cell as f64;
    let mut planner = rustfft::FftPlanner::new();
    let fft = planner.plan_fft_forward(n_per);
    let half = (n_per / 2) as i64;
    let xis: Vec<f64> = (0..n_per)
        .map(|j| 2.0 * std::f64::consts::PI * (j as i64 - half) as f64 / (n_per as f64 * period))
        .collect();
    let mut out = vec![vec![C::new(0.0, 0.0); n_cell]; n_per];
    let mut buf = vec![C::new(0.0, 0.0); n_per];
    for i in 0..n_cell {
        for (n, b) in buf.iter_mut().enumerate() {
            *b = g[n * n_cell + i];
        }
        fft.process(&mut buf);
        // slot m holds sum_n g e^{-2 pi i m n / n_per}; Bloch index j <-> m = j - half mod n_per
        for (j, xi) in xis.iter().enumerate() {
            let m = ((j as i64 - half).rem_euclid(n_per as i64)) as usize;
            out[j][i] = buf[m] * C::from_polar(period, -xi * i as f64 * dx);
        }
    }
    (xis, out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ParsevalReport {
    /// `||g||^2_{L^2}` by direct summation.
    pub lhs: f64,
    /// `(1 / (2 pi T)) ||g_check||^2`.
    pub rhs: f64,
    pub relative_error: f64,
    pub tail_mass: f64,
}

pub fn bloch_parseval_check(g: &[C], n_per: usize, period: f64) -> Result<ParsevalReport, BlochError> {
    let n = g.len();
    let dx = period * n_per as f64 / n as f64;
    let total: f64 = g.iter().map(|z| z.norm_sqr()).sum();
    let edge = (n / 20).max(1);
    let tail: f64 = g[..edge].iter().chain(&g[n - edge..]).map(|z| z.norm_sqr()).sum();
    let tail_mass = if total > 0.0 { tail / total } else { 0.0 };
    if tail_mass > 1e-8 {
        return Err(BlochError::WindowTooSmall(tail_mass));
    }
    let (xis, gc) = bloch_transform(g, n_per, period);
    let dxi = if xis.len() > 1 { xis[1] - xis[0] } else { 2.0 * std::f64::consts::PI / period };
    let lhs = dx * total;
    let rhs = gc.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>() * dxi * dx / (2.0 * std::f64::consts::PI * period);
    let relative_error = if lhs > 0.0 { (lhs - rhs).abs() / lhs } else { (lhs - rhs).abs() };
    Ok(ParsevalReport { lhs, rhs, relative_error, tail_mass })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub half_lengths: Vec<f64>,
    pub log_max: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Regression of `ln max_xi |lambda_c|` against `L1 + L2`.
pub fn exponential_scaling_study(half_lengths: &[f64], sweeps: &[&SpectralSweep]) -> Result<ScalingFit, BlochError> {
    if sweeps.len() < 3 || half_lengths.len() != sweeps.len() {
        return Err(BlochError::TooFewSweeps(sweeps.len()));
    }
    let y: Vec<f64> = sweeps.iter().map(|s| s.max_critical().ln()).collect();
    let (slope, intercept) = linear_fit(half_lengths, &y);
    let residuals = half_lengths.iter().zip(&y).map(|(x, v)| v - (intercept + slope * x)).collect();
    Ok(ScalingFit {
        slope,
        intercept,
        half_lengths: half_lengths.to_vec(),
        log_max: y,
        residuals,
    })
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
