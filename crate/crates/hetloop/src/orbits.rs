//! Heteroclinic front and back, the loop locus in `(gamma, c)` and the
//! periodic orbits that bifurcate from it.
//!
//! Every problem is a truncated boundary-value problem with projection
//! conditions built from left eigenvectors at the equilibria and a phase
//! condition `u(0) = ubar` at the inflection value of the cubic.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::banded::{smallest_singular, BandError};
use crate::bvp::{self, Bvp, BvpError, Hermite, NewtonOptions};
use crate::model::{
    self, equilibrium_points, hyperbolic_splitting, reaction, reaction_deriv, reflect,
    spectral_split, tw_jacobian, tw_param_derivs, tw_vector_field, ModelError, ModelParams,
};

#[derive(Debug, Error)]
pub enum OrbitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bvp(#[from] BvpError),
    #[error(transparent)]
    Linear(#[from] BandError),
    #[error("truncation half-length {half_length} too short: exp(-{rate} * l) = {value:e} > 0.01")]
    Truncation {
        half_length: f64,
        rate: f64,
        value: f64,
    },
    #[error("expected three equilibria, found {0}")]
    Equilibria(usize),
    #[error("epsilon = {eps} exceeds the configured ceiling {ceiling}")]
    EpsilonCeiling { eps: f64, ceiling: f64 },
    #[error("period {t} violates the minimum period heuristic (exp(-alpha T/4) = {value:e} > {limit})")]
    PeriodTooShort { t: f64, value: f64, limit: f64 },
    #[error("periodic orbit for T = {t} did not converge: {source}")]
    Periodic {
        t: f64,
        #[source]
        source: BvpError,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrbitKind {
    Front,
    Back,
    Periodic,
    Adjoint,
}

impl OrbitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OrbitKind::Front => "front",
            OrbitKind::Back => "back",
            OrbitKind::Periodic => "periodic",
            OrbitKind::Adjoint => "adjoint",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "front" => OrbitKind::Front,
            "back" => OrbitKind::Back,
            "periodic" => OrbitKind::Periodic,
            "adjoint" => OrbitKind::Adjoint,
            _ => return None,
        })
    }
}

/// Sampled solution of the travelling-wave ODE (or its adjoint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitProfile {
    pub kind: OrbitKind,
    pub params: ModelParams,
    pub mesh: Vec<f64>,
    pub values: Vec<[f64; 3]>,
    pub tol: f64,
    pub bvp_residual: f64,
}

impl OrbitProfile {
    pub fn interval(&self) -> (f64, f64) {
        (self.mesh[0], *self.mesh.last().unwrap())
    }

    /// Derivatives at the nodes from the vector field (not for adjoint profiles).
    pub fn slopes(&self) -> Vec<[f64; 3]> {
        self.values.iter().map(|y| tw_vector_field(y, &self.params)).collect()
    }

    /// Cubic Hermite interpolant using the vector field for slopes.
    pub fn hermite(&self) -> Hermite {
        let y = self.values.iter().flatten().copied().collect();
        let dy = self.slopes().iter().flatten().copied().collect();
        Hermite::new(self.mesh.clone(), y, dy, 3)
    }

    pub fn eval(&self, h: &Hermite, x: f64) -> [f64; 3] {
        let v = h.eval(x);
        [v[0], v[1], v[2]]
    }

    /// Largest Hermite–Simpson defect over all intervals.
    pub fn collocation_defect(&self) -> f64 {
        let p = &self.params;
        let mut worst = 0.0f64;
        for i in 0..self.mesh.len() - 1 {
            let h = self.mesh[i + 1] - self.mesh[i];
            let (y0, y1) = (&self.values[i], &self.values[i + 1]);
            let (f0, f1) = (tw_vector_field(y0, p), tw_vector_field(y1, p));
            let ym: [f64; 3] =
                std::array::from_fn(|a| 0.5 * (y0[a] + y1[a]) + h / 8.0 * (f0[a] - f1[a]));
            let fm = tw_vector_field(&ym, p);
            for a in 0..3 {
                let r = y1[a] - y0[a] - h / 6.0 * (f0[a] + 4.0 * fm[a] + f1[a]);
                worst = worst.max(r.abs());
            }
        }
        worst
    }

    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        let p = &self.params;
        writeln!(s, "# orbit-profile v1").unwrap();
        writeln!(s, "kind {}", self.kind.as_str()).unwrap();
        writeln!(s, "a {:e}", p.a).unwrap();
        writeln!(s, "gamma {:e}", p.gamma).unwrap();
        writeln!(s, "epsilon {:e}", p.epsilon).unwrap();
        writeln!(s, "c {:e}", p.c).unwrap();
        writeln!(s, "n {}", self.mesh.len() - 1).unwrap();
        writeln!(s, "tol {:e}", self.tol).unwrap();
        writeln!(s, "residual {:e}", self.bvp_residual).unwrap();
        writeln!(s, "# x u v w").unwrap();
        for (x, y) in self.mesh.iter().zip(&self.values) {
            writeln!(s, "{:e} {:e} {:e} {:e}", x, y[0], y[1], y[2]).unwrap();
        }
        s
    }

    pub fn from_checkpoint(text: &str, origin: &str) -> Result<Self, OrbitError> {
        let err = |msg: String| OrbitError::Checkpoint { path: origin.to_string(), msg };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut header = std::collections::BTreeMap::new();
        let mut rows = Vec::new();
        let first = lines.next().ok_or_else(|| err("empty file".into()))?;
        if first.1.trim() != "# orbit-profile v1" {
            return Err(err(format!("line {}: bad magic", first.0 + 1)));
        }
        for (ln, line) in lines {
            let line = line.trim();
            if line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() == 2 && toks[0].chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
                header.insert(toks[0].to_string(), toks[1].to_string());
            } else if toks.len() == 4 {
                let mut r = [0.0; 4];
                for k in 0..4 {
                    r[k] = toks[k]
                        .parse()
                        .map_err(|_| err(format!("line {}: bad number '{}'", ln + 1, toks[k])))?;
                }
                rows.push(r);
            } else {
                return Err(err(format!("line {}: unexpected content", ln + 1)));
            }
        }
        let get = |k: &str| -> Result<&String, OrbitError> {
            header.get(k).ok_or_else(|| err(format!("missing header field '{k}'")))
        };
        let num = |k: &str| -> Result<f64, OrbitError> {
            get(k)?.parse::<f64>().map_err(|_| err(format!("bad value for '{k}'")))
        };
        let kind = OrbitKind::parse(get("kind")?).ok_or_else(|| err("unknown kind".into()))?;
        let n: usize = get("n")?.parse().map_err(|_| err("bad n".into()))?;
        if rows.len() != n + 1 {
            return Err(err(format!("expected {} rows, found {}", n + 1, rows.len())));
        }
        let params = ModelParams {
            a: num("a")?,
            gamma: num("gamma")?,
            epsilon: num("epsilon")?,
            c: num("c")?,
        };
        Ok(Self {
            kind,
            params,
            mesh: rows.iter().map(|r| r[0]).collect(),
            values: rows.iter().map(|r| [r[1], r[2], r[3]]).collect(),
            tol: num("tol")?,
            bvp_residual: num("residual")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), OrbitError> {
        std::fs::write(path, self.to_checkpoint()).map_err(|source| OrbitError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, OrbitError> {
        let text = std::fs::read_to_string(path).map_err(|source| OrbitError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_checkpoint(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OrbitOptions {
    /// Truncation half-length of the heteroclinic problems.
    pub half_length: f64,
    /// Number of mesh intervals for each heteroclinic orbit.
    pub nodes: usize,
    /// Newton tolerance on the collocation residual.
    pub tol: f64,
    /// Nodes per unit length for periodic orbits (on top of the graded part).
    pub periodic_nodes: usize,
    /// Ceiling on epsilon.
    pub eps_ceiling: f64,
}

impl Default for OrbitOptions {
    fn default() -> Self {
        Self {
            half_length: 120.0,
            nodes: 1600,
            tol: 1e-11,
            periodic_nodes: 2400,
            eps_ceiling: model::EPS_STAR,
        }
    }
}

/// The two outer equilibria `e1` (u = 0) and `e2` (largest u).
pub fn outer_equilibria(a: f64, gamma: f64) -> Result<([f64; 3], [f64; 3]), OrbitError> {
    let pts = equilibrium_points(a, gamma)?;
    if pts.len() != 3 {
        return Err(OrbitError::Equilibria(pts.len()));
    }
    Ok((pts[0], pts[2]))
}

pub(crate) fn anchor_u(a: f64) -> f64 {
    (1.0 + a) / 3.0
}

pub(crate) fn gram_schmidt(vs: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut out: Vec<[f64; 3]> = Vec::new();
    for v in vs {
        let mut w = *v;
        for u in &out {
            let d: f64 = (0..3).map(|i| w[i] * u[i]).sum();
            for i in 0..3 {
                w[i] -= d * u[i];
            }
        }
        let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        out.push([w[0] / n, w[1] / n, w[2] / n]);
    }
    out
}

/// Orthonormal left vectors annihilating the unstable (`stable_side = true`)
/// or stable subspace of an equilibrium.
fn annihilators(pt: &[f64; 3], p: &ModelParams, stable_side: bool) -> Option<Vec<[f64; 3]>> {
    let sp = hyperbolic_splitting(pt, p).ok()?;
    let ls = if stable_side { &sp.stable_left } else { &sp.unstable_left };
    Some(gram_schmidt(ls))
}

/// Which end of a heteroclinic orbit, with the equilibrium it tends to.
#[derive(Clone, Copy)]
pub(crate) enum End {
    Left,
    Right,
}

pub(crate) fn endpoint_eq(kind: OrbitKind, end: End, a: f64, gamma: f64) -> [f64; 3] {
    let (e1, e2) = match outer_equilibria(a, gamma) {
        Ok(v) => v,
        Err(_) => return [f64::NAN; 3],
    };
    match (kind, end) {
        (OrbitKind::Front, End::Left) | (OrbitKind::Back, End::Right) => e1,
        _ => e2,
    }
}

/// Projection residuals at one end: left end requires y - e in E^u, right
/// end requires y - e in E^s.
fn projection_residual(kind: OrbitKind, end: End, y: &[f64], p: &ModelParams) -> Vec<f64> {
    let e = endpoint_eq(kind, end, p.a, p.gamma);
    let count = match end {
        End::Left => 2,
        End::Right => 1,
    };
    let ann = match end {
        End::Left => annihilators(&e, p, true),
        End::Right => annihilators(&e, p, false),
    };
    match ann {
        Some(ns) if ns.len() == count => ns
            .iter()
            .map(|n| (0..3).map(|i| n[i] * (y[i] - e[i])).sum())
            .collect(),
        _ => vec![f64::NAN; count],
    }
}

/// One or two heteroclinic orbits on a common interval, with free `c` and
/// optionally free `gamma`.
struct ConnectionBvp {
    a: f64,
    eps: f64,
    gamma_fixed: f64,
    orbits: Vec<OrbitKind>,
    free_gamma: bool,
}

impl ConnectionBvp {
    fn m3(&self) -> usize {
        3 * self.orbits.len()
    }

    fn gc(&self, z: &[f64]) -> (f64, f64) {
        let g = if self.free_gamma { z[self.m3()] } else { self.gamma_fixed };
        (g, z[self.dim() - 1])
    }

    fn params(&self, g: f64, c: f64) -> ModelParams {
        ModelParams { a: self.a, gamma: g, epsilon: self.eps, c }
    }

    fn np(&self) -> usize {
        1 + usize::from(self.free_gamma)
    }

    fn end_conditions(&self, end: End, z: &[f64], r: &mut [f64], j: &mut [f64]) {
        let d = self.dim();
        let (g, c) = self.gc(z);
        let p = self.params(g, c);
        let per = match end {
            End::Left => 2,
            End::Right => 1,
        };
        j.iter_mut().for_each(|v| *v = 0.0);
        for (k, &kind) in self.orbits.iter().enumerate() {
            let y = &z[3 * k..3 * k + 3];
            let res = projection_residual(kind, end, y, &p);
            let e = endpoint_eq(kind, end, self.a, g);
            let ann = match end {
                End::Left => annihilators(&e, &p, true),
                End::Right => annihilators(&e, &p, false),
            };
            // parameter derivatives by central differences
            let hc = 1e-7 * c.abs().max(1.0);
            let rc_p = projection_residual(kind, end, y, &self.params(g, c + hc));
            let rc_m = projection_residual(kind, end, y, &self.params(g, c - hc));
            let (rg_p, rg_m, hg) = if self.free_gamma {
                let hg = 1e-7 * g.abs().max(1.0);
                (
                    projection_residual(kind, end, y, &self.params(g + hg, c)),
                    projection_residual(kind, end, y, &self.params(g - hg, c)),
                    hg,
                )
            } else {
                (vec![], vec![], 1.0)
            };
            for q in 0..per {
                let row = k * per + q;
                r[row] = res[q];
                // a wrong splitting leaves the residual NaN and the row empty
                if let Some(ns) = ann.as_ref().filter(|ns| ns.len() == per) {
                    for i in 0..3 {
                        j[row * d + 3 * k + i] = ns[q][i];
                    }
                }
                j[row * d + d - 1] = (rc_p[q] - rc_m[q]) / (2.0 * hc);
                if self.free_gamma {
                    j[row * d + self.m3()] = (rg_p[q] - rg_m[q]) / (2.0 * hg);
                }
            }
        }
    }
}

impl Bvp for ConnectionBvp {
    fn dim(&self) -> usize {
        self.m3() + self.np()
    }

    fn rhs(&self, _x: f64, z: &[f64], f: &mut [f64]) {
        let (g, c) = self.gc(z);
        let p = self.params(g, c);
        for k in 0..self.orbits.len() {
            let y = [z[3 * k], z[3 * k + 1], z[3 * k + 2]];
            let fy = tw_vector_field(&y, &p);
            f[3 * k..3 * k + 3].copy_from_slice(&fy);
        }
        for v in &mut f[self.m3()..] {
            *v = 0.0;
        }
    }

    fn jac(&self, _x: f64, z: &[f64], j: &mut [f64]) {
        let d = self.dim();
        let (g, c) = self.gc(z);
        let p = self.params(g, c);
        j.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..self.orbits.len() {
            let y = [z[3 * k], z[3 * k + 1], z[3 * k + 2]];
            let jy = tw_jacobian(&y, &p);
            let dp = tw_param_derivs(&y, &p);
            for a in 0..3 {
                for b in 0..3 {
                    j[(3 * k + a) * d + 3 * k + b] = jy[a][b];
                }
                if self.free_gamma {
                    j[(3 * k + a) * d + self.m3()] = dp[0][a];
                }
                j[(3 * k + a) * d + d - 1] = dp[1][a];
            }
        }
    }

    fn n_left(&self) -> usize {
        2 * self.orbits.len()
    }

    fn left(&self, z: &[f64], r: &mut [f64], j: &mut [f64]) {
        self.end_conditions(End::Left, z, r, j);
    }

    fn n_right(&self) -> usize {
        self.orbits.len()
    }

    fn right(&self, z: &[f64], r: &mut [f64], j: &mut [f64]) {
        self.end_conditions(End::Right, z, r, j);
    }

    fn interior_points(&self) -> Vec<(f64, usize)> {
        vec![(0.0, self.orbits.len())]
    }

    fn interior(&self, _k: usize, z: &[f64], r: &mut [f64], j: &mut [f64]) {
        let d = self.dim();
        j.iter_mut().for_each(|v| *v = 0.0);
        let ua = anchor_u(self.a);
        for k in 0..self.orbits.len() {
            r[k] = z[3 * k] - ua;
            j[k * d + 3 * k] = 1.0;
        }
    }
}

/// Largest root of f(u) = w (right branch of the critical manifold).
fn right_branch(w: f64, a: f64) -> f64 {
    let mut u = 1.0;
    for _ in 0..60 {
        let du = (reaction(u, a) - w) / reaction_deriv(u, a);
        u -= du;
        if du.abs() < 1e-15 {
            break;
        }
    }
    u
}

/// Singular-limit front: fast layer at w = 0 followed by the slow drift on
/// the right branch towards e2. Sampled on `xs` (sorted).
pub fn singular_front_seed(p: &ModelParams, xs: &[f64]) -> Vec<[f64; 3]> {
    let a = p.a;
    let k = 1.0 / 2f64.sqrt();
    let ua = anchor_u(a);
    let x0 = (1.0 / ua - 1.0).ln() / k;
    let fast = |x: f64| 1.0 / (1.0 + (-(k * (x - x0))).exp());
    // slow flow dw/dx = (eps/c)(U_R(w) - gamma w), RK4 from x = 0
    let slow = |w: f64| p.epsilon / p.c * (right_branch(w, a) - p.gamma * w);
    let xmax = xs.last().copied().unwrap_or(0.0).max(0.0);
    let hstep = 0.05;
    let nsteps = (xmax / hstep).ceil() as usize + 1;
    let mut ws = vec![0.0; nsteps + 1];
    for i in 0..nsteps {
        let w = ws[i];
        let k1 = slow(w);
        let k2 = slow(w + 0.5 * hstep * k1);
        let k3 = slow(w + 0.5 * hstep * k2);
        let k4 = slow(w + hstep * k3);
        ws[i + 1] = w + hstep / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    let w_at = |x: f64| -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let t = x / hstep;
        let i = (t.floor() as usize).min(nsteps - 1);
        ws[i] + (t - i as f64) * (ws[i + 1] - ws[i])
    };
    xs.iter()
        .map(|&x| {
            let w = w_at(x);
            let ur = right_branch(w, a);
            let uf = fast(x);
            let u = uf * ur;
            let duf = k * uf * (1.0 - uf);
            let dw = if x > 0.0 { slow(w) } else { 0.0 };
            let dur = dw / reaction_deriv(ur, a);
            [u, duf * ur + uf * dur, w]
        })
        .collect()
}

fn check_truncation(p: &ModelParams, half_length: f64) -> Result<(), OrbitError> {
    let (e1, e2) = outer_equilibria(p.a, p.gamma)?;
    for e in [e1, e2] {
        let sp = hyperbolic_splitting(&e, p)?;
        if sp.unstable.len() != 1 {
            return Err(OrbitError::Model(ModelError::WrongSplitting {
                side: "unstable",
                u: e[0],
                found: sp.unstable.len(),
            }));
        }
        let rate = sp
            .eigen
            .values
            .iter()
            .map(|z| z.re.abs())
            .fold(f64::INFINITY, f64::min);
        let value = (-rate * half_length).exp();
        if value > 0.01 {
            return Err(OrbitError::Truncation { half_length, rate, value });
        }
    }
    Ok(())
}

/// Equidistributing mesh for node samples `(xs, ys)`: arclength-like monitor
/// with a uniform floor carrying about a third of the nodes.
fn adapted_mesh(xs: &[f64], ys: &[[f64; 3]], a: f64, b: f64, n: usize, anchors: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let (i0, i1) = if i == 0 { (0, 1) } else if i + 1 == xs.len() { (i - 1, i) } else { (i - 1, i + 1) };
        let dx = xs[i1] - xs[i0];
        let d: f64 = (0..3).map(|k| ((ys[i1][k] - ys[i0][k]) / dx).powi(2)).sum::<f64>().sqrt();
        s.push(d);
    }
    let smax = s.iter().cloned().fold(1e-300, f64::max);
    let len = b - a;
    let mut integral = 0.0;
    for i in 0..xs.len() - 1 {
        integral += 0.5 * (s[i] + s[i + 1]) / smax * (xs[i + 1] - xs[i]);
    }
    let floor = 0.5 * integral / len;
    let xs_v = xs.to_vec();
    let monitor = move |x: f64| -> f64 {
        let i = xs_v.partition_point(|&v| v <= x).clamp(1, xs_v.len() - 1);
        let t = ((x - xs_v[i - 1]) / (xs_v[i] - xs_v[i - 1])).clamp(0.0, 1.0);
        let sv = s[i - 1] + t * (s[i] - s[i - 1]);
        floor + sv / smax
    };
    bvp::equidistributed_mesh(a, b, n, anchors, &monitor)
}

fn solve_connection(
    prob: &ConnectionBvp,
    mesh: &[f64],
    guess: &[f64],
    opts: &OrbitOptions,
) -> Result<bvp::BvpSolution, OrbitError> {
    let nopts = NewtonOptions { tol: opts.tol, ..NewtonOptions::default() };
    Ok(bvp::solve(prob, mesh, guess, &nopts)?)
}

/// Hermite interpolation of a connection solution onto a new mesh.
fn transfer(prob: &ConnectionBvp, sol: &bvp::BvpSolution, mesh: &[f64]) -> Vec<f64> {
    let d = prob.dim();
    let mut dy = vec![0.0; sol.y.len()];
    for i in 0..sol.mesh.len() {
        let mut f = vec![0.0; d];
        prob.rhs(sol.mesh[i], sol.node(i), &mut f);
        dy[i * d..(i + 1) * d].copy_from_slice(&f);
    }
    let h = Hermite::new(sol.mesh.clone(), sol.y.clone(), dy, d);
    mesh.iter().flat_map(|&x| h.eval(x)).collect()
}

fn split_solution(prob: &ConnectionBvp, sol: &bvp::BvpSolution, tol: f64) -> (ModelParams, Vec<OrbitProfile>) {
    let (g, c) = prob.gc(sol.node(0));
    let p = prob.params(g, c);
    let profiles = prob
        .orbits
        .iter()
        .enumerate()
        .map(|(k, &kind)| OrbitProfile {
            kind,
            params: p,
            mesh: sol.mesh.clone(),
            values: (0..sol.mesh.len())
                .map(|i| {
                    let z = sol.node(i);
                    [z[3 * k], z[3 * k + 1], z[3 * k + 2]]
                })
                .collect(),
            tol,
            bvp_residual: sol.residual,
        })
        .collect();
    (p, profiles)
}

/// Solve, remesh on the solution, solve again.
fn solve_with_remesh(
    prob: &ConnectionBvp,
    seed_x: &[f64],
    seed_y: &[[f64; 3]],
    extra: &[f64],
    opts: &OrbitOptions,
) -> Result<(ModelParams, Vec<OrbitProfile>), OrbitError> {
    let l = opts.half_length;
    let mesh = adapted_mesh(seed_x, seed_y, -l, l, opts.nodes, &[0.0]);
    let d = prob.dim();
    let m = prob.orbits.len();
    let build_guess = |mesh: &[f64]| -> Vec<f64> {
        // later orbits are seeded with the reflection of the first
        let hs: Vec<Vec<[f64; 3]>> = (0..m)
            .map(|k| {
                let ys: Vec<[f64; 3]> = if k == 0 {
                    seed_y.to_vec()
                } else {
                    seed_y.iter().map(|y| reflect(y, prob.a)).collect()
                };
                linear_resample(seed_x, &ys, mesh)
            })
            .collect();
        let mut z = Vec::with_capacity(mesh.len() * d);
        for i in 0..mesh.len() {
            for h in &hs {
                z.extend_from_slice(&h[i]);
            }
            z.extend_from_slice(extra);
        }
        z
    };
    let guess = build_guess(&mesh);
    let sol = solve_connection(prob, &mesh, &guess, opts)?;
    // remesh with the converged first orbit
    let first: Vec<[f64; 3]> = (0..sol.mesh.len()).map(|i| {
        let z = sol.node(i);
        [z[0], z[1], z[2]]
    }).collect();
    let mesh2 = adapted_mesh(&sol.mesh, &first, -l, l, opts.nodes, &[0.0]);
    let guess2 = transfer(prob, &sol, &mesh2);
    let sol2 = solve_connection(prob, &mesh2, &guess2, opts)?;
    Ok(split_solution(prob, &sol2, opts.tol))
}

fn linear_resample(xs: &[f64], ys: &[[f64; 3]], mesh: &[f64]) -> Vec<[f64; 3]> {
    mesh.iter()
        .map(|&x| {
            let i = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1);
            let t = ((x - xs[i - 1]) / (xs[i] - xs[i - 1])).clamp(0.0, 1.0);
            std::array::from_fn(|k| ys[i - 1][k] + t * (ys[i][k] - ys[i - 1][k]))
        })
        .collect()
}

fn seed_samples(p: &ModelParams, l: f64) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = (40.0 * l) as usize;
    let xs: Vec<f64> = (0..=n).map(|k| -l + 2.0 * l * k as f64 / n as f64).collect();
    let ys = singular_front_seed(p, &xs);
    (xs, ys)
}

fn guess_samples(guess: &OrbitProfile) -> (Vec<f64>, Vec<[f64; 3]>) {
    (guess.mesh.clone(), guess.values.clone())
}

/// Front from e1 to e2 at fixed `gamma`, with `c` free (initial value `p.c`).
pub fn compute_front(
    p: &ModelParams,
    guess: Option<&OrbitProfile>,
    opts: &OrbitOptions,
) -> Result<OrbitProfile, OrbitError> {
    compute_connection(OrbitKind::Front, p, guess, opts)
}

/// Back from e2 to e1 at fixed `gamma`, with `c` free.
pub fn compute_back(
    p: &ModelParams,
    guess: Option<&OrbitProfile>,
    opts: &OrbitOptions,
) -> Result<OrbitProfile, OrbitError> {
    compute_connection(OrbitKind::Back, p, guess, opts)
}

fn compute_connection(
    kind: OrbitKind,
    p: &ModelParams,
    guess: Option<&OrbitProfile>,
    opts: &OrbitOptions,
) -> Result<OrbitProfile, OrbitError> {
    p.validate()?;
    check_truncation(p, opts.half_length)?;
    let prob = ConnectionBvp {
        a: p.a,
        eps: p.epsilon,
        gamma_fixed: p.gamma,
        orbits: vec![kind],
        free_gamma: false,
    };
    let (xs, mut ys) = match guess {
        Some(g) => guess_samples(g),
        None => seed_samples(p, opts.half_length),
    };
    let c0 = guess.map(|g| g.params.c).unwrap_or(p.c);
    if guess.is_none() && kind == OrbitKind::Back {
        ys = ys.iter().map(|y| reflect(y, p.a)).collect();
    }
    let (_, mut prof) = solve_with_remesh(&prob, &xs, &ys, &[c0], opts)?;
    Ok(prof.remove(0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopLocus {
    pub epsilon: f64,
    pub gamma0: f64,
    pub c_star: f64,
    pub h1: OrbitProfile,
    pub h2: OrbitProfile,
    pub splitting_residuals: [f64; 2],
}

/// Speed of the bistable front of u'' - c u' + f(u) = 0 joining 0 and 1.
pub fn fast_front_speed(a: f64) -> f64 {
    2f64.sqrt() * (0.5 - a)
}

/// Closing defects of a heteroclinic profile: projection conditions at both
/// ends and the phase condition, as a max norm.
pub fn closing_defect(h: &OrbitProfile) -> f64 {
    let p = &h.params;
    let l = projection_residual(h.kind, End::Left, &h.values[0], p);
    let r = projection_residual(h.kind, End::Right, h.values.last().unwrap(), p);
    let i0 = h.mesh.iter().position(|&x| x == 0.0);
    let phase = i0.map(|i| (h.values[i][0] - anchor_u(p.a)).abs()).unwrap_or(f64::INFINITY);
    l.iter().chain(r.iter()).fold(phase, |m, v| m.max(v.abs()))
}

/// Loop locus: solves front and back simultaneously for `(gamma, c)`.
pub fn locate_loop(a: f64, epsilon: f64, opts: &OrbitOptions) -> Result<LoopLocus, OrbitError> {
    if epsilon > opts.eps_ceiling {
        return Err(OrbitError::EpsilonCeiling { eps: epsilon, ceiling: opts.eps_ceiling });
    }
    let g0 = model::symmetric_gamma(a);
    let p0 = ModelParams::new(a, g0, epsilon, fast_front_speed(a))?;
    let front = compute_front(&p0, None, opts)?;
    solve_loop(a, epsilon, &front, g0, front.params.c, opts)
}

/// Loop at `epsilon` seeded by the front of a converged loop `prev`.
pub fn continue_loop(prev: &LoopLocus, epsilon: f64, opts: &OrbitOptions) -> Result<LoopLocus, OrbitError> {
    if epsilon > opts.eps_ceiling {
        return Err(OrbitError::EpsilonCeiling { eps: epsilon, ceiling: opts.eps_ceiling });
    }
    ModelParams::new(prev.h1.params.a, prev.gamma0, epsilon, prev.c_star)?;
    solve_loop(prev.h1.params.a, epsilon, &prev.h1, prev.gamma0, prev.c_star, opts)
}

fn solve_loop(a: f64, epsilon: f64, seed: &OrbitProfile, g: f64, c: f64, opts: &OrbitOptions) -> Result<LoopLocus, OrbitError> {
    let prob = ConnectionBvp {
        a,
        eps: epsilon,
        gamma_fixed: g,
        orbits: vec![OrbitKind::Front, OrbitKind::Back],
        free_gamma: true,
    };
    let (xs, ys) = guess_samples(seed);
    let (p, prof) = solve_with_remesh(&prob, &xs, &ys, &[g, c], opts)?;
    let (h1, h2) = (prof[0].clone(), prof[1].clone());
    let splitting_residuals = [closing_defect(&h1), closing_defect(&h2)];
    Ok(LoopLocus {
        epsilon,
        gamma0: p.gamma,
        c_star: p.c,
        h1,
        h2,
        splitting_residuals,
    })
}

/// Kernel certificate for the variational equation along a heteroclinic
/// orbit: the two smallest singular values of the discretised operator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelCertificate {
    pub sigma_min: f64,
    pub sigma_next: f64,
    pub ratio: f64,
    /// Angle between the discrete kernel vector and h'.
    pub angle_to_tangent: f64,
}

struct Variational<'a> {
    h: &'a Hermite,
    p: ModelParams,
    left: Vec<[f64; 3]>,
    right: Vec<[f64; 3]>,
}

impl Bvp for Variational<'_> {
    fn dim(&self) -> usize {
        3
    }
    fn rhs(&self, x: f64, y: &[f64], f: &mut [f64]) {
        let hv = self.h.eval(x);
        let j = tw_jacobian(&[hv[0], hv[1], hv[2]], &self.p);
        for a in 0..3 {
            f[a] = (0..3).map(|b| j[a][b] * y[b]).sum();
        }
    }
    fn jac(&self, x: f64, _y: &[f64], jo: &mut [f64]) {
        let hv = self.h.eval(x);
        let j = tw_jacobian(&[hv[0], hv[1], hv[2]], &self.p);
        for a in 0..3 {
            for b in 0..3 {
                jo[a * 3 + b] = j[a][b];
            }
        }
    }
    fn n_left(&self) -> usize {
        self.left.len()
    }
    fn left(&self, y: &[f64], r: &mut [f64], j: &mut [f64]) {
        for (q, n) in self.left.iter().enumerate() {
            r[q] = (0..3).map(|i| n[i] * y[i]).sum();
            j[q * 3..q * 3 + 3].copy_from_slice(n);
        }
    }
    fn n_right(&self) -> usize {
        self.right.len()
    }
    fn right(&self, y: &[f64], r: &mut [f64], j: &mut [f64]) {
        for (q, n) in self.right.iter().enumerate() {
            r[q] = (0..3).map(|i| n[i] * y[i]).sum();
            j[q * 3..q * 3 + 3].copy_from_slice(n);
        }
    }
}

pub fn variational_certificate(h: &OrbitProfile) -> Result<KernelCertificate, OrbitError> {
    let p = h.params;
    let herm = h.hermite();
    let src = endpoint_eq(h.kind, End::Left, p.a, p.gamma);
    let tgt = endpoint_eq(h.kind, End::Right, p.a, p.gamma);
    let left = annihilators(&src, &p, true).ok_or(ModelError::NonHyperbolic { u: src[0], re: 0.0, im: 0.0 })?;
    let right = annihilators(&tgt, &p, false).ok_or(ModelError::NonHyperbolic { u: tgt[0], re: 0.0, im: 0.0 })?;
    let var = Variational { h: &herm, p, left, right };
    let zero = vec![0.0; 3 * h.mesh.len()];
    let jm = bvp::jacobian(&var, &h.mesh, &zero)?;
    let ss = smallest_singular(jm, 40)?;
    let tangent: Vec<f64> = h.slopes().iter().flatten().copied().collect();
    let tn = tangent.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = ss.right.iter().zip(&tangent).map(|(a, b)| a * b).sum::<f64>() / tn;
    Ok(KernelCertificate {
        sigma_min: ss.sigma[0],
        sigma_next: ss.sigma[1],
        ratio: ss.sigma[1] / ss.sigma[0],
        angle_to_tangent: dot.abs().min(1.0).acos(),
    })
}

// ---------------------------------------------------------------------------
// Periodic orbits

/// Periodic orbit on [0, T] with state (y, q, gamma, c), q = y(0) carried
/// along so that closure y(T) = q stays a local condition.
struct PeriodicBvp {
    a: f64,
    eps: f64,
    period: f64,
}

impl PeriodicBvp {
    fn params(&self, z: &[f64]) -> ModelParams {
        ModelParams { a: self.a, gamma: z[6], epsilon: self.eps, c: z[7] }
    }
}

impl Bvp for PeriodicBvp {
    fn dim(&self) -> usize {
        8
    }
    fn rhs(&self, _x: f64, z: &[f64], f: &mut [f64]) {
        let p = self.params(z);
        let fy = tw_vector_field(&[z[0], z[1], z[2]], &p);
        f[..3].copy_from_slice(&fy);
        f[3..].iter_mut().for_each(|v| *v = 0.0);
    }
    fn jac(&self, _x: f64, z: &[f64], j: &mut [f64]) {
        let p = self.params(z);
        let y = [z[0], z[1], z[2]];
        let jy = tw_jacobian(&y, &p);
        let dp = tw_param_derivs(&y, &p);
        j.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..3 {
            for b in 0..3 {
                j[a * 8 + b] = jy[a][b];
            }
            j[a * 8 + 6] = dp[0][a];
            j[a * 8 + 7] = dp[1][a];
        }
    }
    fn n_left(&self) -> usize {
        4
    }
    fn left(&self, z: &[f64], r: &mut [f64], j: &mut [f64]) {
        j.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..3 {
            r[a] = z[3 + a] - z[a];
            j[a * 8 + 3 + a] = 1.0;
            j[a * 8 + a] = -1.0;
        }
        r[3] = z[0] - anchor_u(self.a);
        j[3 * 8] = 1.0;
    }
    fn n_right(&self) -> usize {
        3
    }
    fn right(&self, z: &[f64], r: &mut [f64], j: &mut [f64]) {
        j.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..3 {
            r[a] = z[a] - z[3 + a];
            j[a * 8 + a] = 1.0;
            j[a * 8 + 3 + a] = -1.0;
        }
    }
    fn interior_points(&self) -> Vec<(f64, usize)> {
        vec![(0.5 * self.period, 1)]
    }
    fn interior(&self, _k: usize, z: &[f64], r: &mut [f64], j: &mut [f64]) {
        j.iter_mut().for_each(|v| *v = 0.0);
        r[0] = z[0] - anchor_u(self.a);
        j[0] = 1.0;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodicEntry {
    pub period: f64,
    /// (gamma - gamma0, c - c*).
    pub mu: [f64; 2],
    pub orbit: OrbitProfile,
    pub l1: f64,
    pub l2: f64,
    pub closure: f64,
    /// sup_{|x| <= L1} |p - h1| + sup_{|x - T/2| <= L2} |p - h2(. - T/2)|.
    pub sup_distance: f64,
    /// Fraction of arclength within the tube of radius `tube_radius` around the loop.
    pub tube_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodicFamily {
    pub entries: Vec<PeriodicEntry>,
    pub failures: Vec<(f64, String)>,
    pub alpha: f64,
    pub tube_radius: f64,
}

/// Smallest decay rate over the four leading rates of the loop.
pub fn loop_min_rate(lp: &LoopLocus) -> Result<f64, OrbitError> {
    let p = lp.h1.params;
    let (e1, e2) = outer_equilibria(p.a, p.gamma)?;
    let s1 = spectral_split(&e1, &p)?;
    let s2 = spectral_split(&e2, &p)?;
    Ok(s1.alpha_s.min(s1.alpha_u).min(s2.alpha_s).min(s2.alpha_u))
}

/// Glued initial guess: h1 on [-T/4, T/4] around 0, h2 on [-T/4, T/4]
/// around T/2, mapped periodically onto [0, T].
fn glued_guess(lp: &LoopLocus, t: f64, nodes: usize) -> (Vec<f64>, Vec<[f64; 3]>) {
    let q = 0.25 * t;
    let h1 = lp.h1.hermite();
    let h2 = lp.h2.hermite();
    let piece = |x: f64| -> [f64; 3] {
        let v = if x <= q {
            h1.eval(x)
        } else if x <= 3.0 * q {
            h2.eval(x - 2.0 * q)
        } else {
            h1.eval(x - t)
        };
        [v[0], v[1], v[2]]
    };
    // monitor from the heteroclinic profiles
    let fine = 40 * (t as usize).max(10);
    let xs: Vec<f64> = (0..=fine).map(|k| t * k as f64 / fine as f64).collect();
    let ys: Vec<[f64; 3]> = xs.iter().map(|&x| piece(x)).collect();
    let mesh = adapted_mesh(&xs, &ys, 0.0, t, nodes, &[q, 2.0 * q, 3.0 * q]);
    let vals = mesh.iter().map(|&x| piece(x)).collect();
    (mesh, vals)
}

fn solve_periodic_one(lp: &LoopLocus, t: f64, opts: &OrbitOptions) -> Result<OrbitProfile, OrbitError> {
    let p = lp.h1.params;
    let prob = PeriodicBvp { a: p.a, eps: p.epsilon, period: t };
    let nodes = opts.periodic_nodes;
    let (mesh, vals) = glued_guess(lp, t, nodes);
    let q0 = vals[0];
    let guess: Vec<f64> = vals
        .iter()
        .flat_map(|y| [y[0], y[1], y[2], q0[0], q0[1], q0[2], lp.gamma0, lp.c_star])
        .collect();
    let nopts = NewtonOptions { tol: opts.tol, ..NewtonOptions::default() };
    let sol = bvp::solve(&prob, &mesh, &guess, &nopts).map_err(|source| OrbitError::Periodic { t, source })?;
    // remesh on the solution
    let ys: Vec<[f64; 3]> = (0..sol.mesh.len()).map(|i| {
        let z = sol.node(i);
        [z[0], z[1], z[2]]
    }).collect();
    let q = 0.25 * t;
    let mesh2 = adapted_mesh(&sol.mesh, &ys, 0.0, t, nodes, &[q, 2.0 * q, 3.0 * q]);
    let mut dy = vec![0.0; sol.y.len()];
    for i in 0..sol.mesh.len() {
        let mut f = vec![0.0; 8];
        prob.rhs(sol.mesh[i], sol.node(i), &mut f);
        dy[i * 8..(i + 1) * 8].copy_from_slice(&f);
    }
    let herm = Hermite::new(sol.mesh.clone(), sol.y.clone(), dy, 8);
    let guess2: Vec<f64> = mesh2.iter().flat_map(|&x| herm.eval(x)).collect();
    let sol2 = bvp::solve(&prob, &mesh2, &guess2, &nopts).map_err(|source| OrbitError::Periodic { t, source })?;
    let z0 = sol2.node(0);
    let params = ModelParams { a: p.a, gamma: z0[6], epsilon: p.epsilon, c: z0[7] };
    Ok(OrbitProfile {
        kind: OrbitKind::Periodic,
        params,
        mesh: sol2.mesh.clone(),
        values: (0..sol2.mesh.len())
            .map(|i| {
                let z = sol2.node(i);
                [z[0], z[1], z[2]]
            })
            .collect(),
        tol: opts.tol,
        bvp_residual: sol2.residual,
    })
}

fn dist3(a: &[f64; 3], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Sup-distance between a periodic orbit and the loop.
pub fn sup_distance(lp: &LoopLocus, orbit: &OrbitProfile, l1: f64, l2: f64) -> f64 {
    let t = orbit.interval().1;
    let h1 = lp.h1.hermite();
    let h2 = lp.h2.hermite();
    let mut s1 = 0.0f64;
    let mut s2 = 0.0f64;
    for (x, y) in orbit.mesh.iter().zip(&orbit.values) {
        let xs = if *x > 0.5 * t + l2 { x - t } else { *x };
        if xs.abs() <= l1 {
            s1 = s1.max(dist3(y, &h1.eval(xs)));
        }
        if (x - 0.5 * t).abs() <= l2 {
            s2 = s2.max(dist3(y, &h2.eval(x - 0.5 * t)));
        }
    }
    s1 + s2
}

fn tube_fraction(lp: &LoopLocus, orbit: &OrbitProfile, radius: f64) -> f64 {
    let pts: Vec<&[f64; 3]> = lp.h1.values.iter().chain(lp.h2.values.iter()).collect();
    let mut inside = 0.0;
    let mut total = 0.0;
    for i in 0..orbit.values.len() - 1 {
        let (y0, y1) = (&orbit.values[i], &orbit.values[i + 1]);
        let seg = dist3(y0, y1);
        let mid: [f64; 3] = std::array::from_fn(|k| 0.5 * (y0[k] + y1[k]));
        let d = pts.iter().map(|q| dist3(&mid, &q[..])).fold(f64::INFINITY, f64::min);
        total += seg;
        if d <= radius {
            inside += seg;
        }
    }
    inside / total
}

/// Periodic orbits of the requested periods bifurcating from the loop.
pub fn continue_periodic(
    lp: &LoopLocus,
    periods: &[f64],
    opts: &OrbitOptions,
    min_period_limit: f64,
    tube_radius: f64,
) -> Result<PeriodicFamily, OrbitError> {
    let alpha = loop_min_rate(lp)?;
    let mut ts: Vec<f64> = periods.to_vec();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    for &t in &ts {
        let value = (-alpha * t / 4.0).exp();
        if value > min_period_limit {
            return Err(OrbitError::PeriodTooShort { t, value, limit: min_period_limit });
        }
        if 0.25 * t > opts.half_length {
            return Err(OrbitError::Truncation { half_length: opts.half_length, rate: alpha, value });
        }
    }
    use rayon::prelude::*;
    let results: Vec<(f64, Result<OrbitProfile, OrbitError>)> =
        ts.par_iter().map(|&t| (t, solve_periodic_one(lp, t, opts))).collect();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (t, r) in results {
        match r {
            Ok(orbit) => {
                let (l1, l2) = (0.25 * t, 0.25 * t);
                let closure = dist3(&orbit.values[0], &orbit.values.last().unwrap()[..]);
                let sup = sup_distance(lp, &orbit, l1, l2);
                let tube = tube_fraction(lp, &orbit, tube_radius);
                entries.push(PeriodicEntry {
                    period: t,
                    mu: [orbit.params.gamma - lp.gamma0, orbit.params.c - lp.c_star],
                    orbit,
                    l1,
                    l2,
                    closure,
                    sup_distance: sup,
                    tube_fraction: tube,
                });
            }
            Err(e) => failures.push((t, e.to_string())),
        }
    }
    Ok(PeriodicFamily { entries, failures, alpha, tube_radius })
}
