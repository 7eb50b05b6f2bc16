//! Bounded adjoint solutions along the loop, Melnikov integrals and the
//! boundary inner products that feed the reduced determinant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::banded::{smallest_singular, BandError};
use crate::bvp::{self, Bvp, BvpError, Hermite};
use crate::model::{
    coupling_matrix, hyperbolic_splitting, spectral_split, tw_jacobian, tw_param_derivs,
    tw_vector_field, ModelError, ModelParams,
};
use crate::orbits::{endpoint_eq, gram_schmidt, outer_equilibria, End, OrbitError, OrbitKind, OrbitProfile};

#[derive(Debug, Error)]
pub enum MelnikovError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Orbit(#[from] OrbitError),
    #[error(transparent)]
    Bvp(#[from] BvpError),
    #[error(transparent)]
    Linear(#[from] BandError),
    #[error("profile of kind {0:?} is not a heteroclinic orbit")]
    NotHeteroclinic(OrbitKind),
    #[error("adjoint kernel is not one-dimensional (sigma = {sigma:?})")]
    KernelDimension { sigma: [f64; 2] },
    #[error("mesh has no node at x = 0")]
    NoAnchorNode,
    #[error("integral {name} = {value:e} unreliable (error estimate {error:e})")]
    Unreliable { name: &'static str, value: f64, error: f64 },
    #[error("requested x = {x} outside the profile interval [{lo}, {hi}]")]
    OutOfRange { x: f64, lo: f64, hi: f64 },
    #[error("front and back profiles do not share parameters")]
    Mismatch,
}

/// Bounded solution of `psi' = -A(x)^T psi` along a heteroclinic orbit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjointProfile {
    pub profile: OrbitProfile,
    /// Kind of the orbit the adjoint is attached to.
    pub parent: OrbitKind,
    /// The heteroclinic orbit itself (needed for the adjoint vector field).
    pub orbit: OrbitProfile,
    /// Two smallest singular values of the discrete adjoint operator.
    pub sigma: [f64; 2],
}

impl AdjointProfile {
    pub fn slopes(&self) -> Vec<[f64; 3]> {
        let h = self.orbit.hermite();
        self.profile
            .mesh
            .iter()
            .zip(&self.profile.values)
            .map(|(&x, psi)| adjoint_rhs(&h, &self.profile.params, x, psi))
            .collect()
    }

    pub fn hermite(&self) -> Hermite {
        let y = self.profile.values.iter().flatten().copied().collect();
        let dy = self.slopes().iter().flatten().copied().collect();
        Hermite::new(self.profile.mesh.clone(), y, dy, 3)
    }

    /// Largest residual of the discrete adjoint problem (collocation and
    /// boundary rows) at the stored solution.
    pub fn residual(&self) -> Result<f64, MelnikovError> {
        let herm = self.orbit.hermite();
        let prob = AdjointBvp::new(&self.orbit, &herm)?;
        self.residual_with(&prob)
    }
}

fn adjoint_rhs(h: &Hermite, p: &ModelParams, x: f64, psi: &[f64; 3]) -> [f64; 3] {
    let hv = h.eval(x);
    let a = tw_jacobian(&[hv[0], hv[1], hv[2]], p);
    std::array::from_fn(|i| -(0..3).map(|k| a[k][i] * psi[k]).sum::<f64>())
}

struct AdjointBvp<'a> {
    h: &'a Hermite,
    p: ModelParams,
    /// Unstable right vectors at the source (psi must be orthogonal).
    left: Vec<[f64; 3]>,
    /// Stable right vectors at the target.
    right: Vec<[f64; 3]>,
}

impl<'a> AdjointBvp<'a> {
    fn new(orbit: &OrbitProfile, h: &'a Hermite) -> Result<Self, MelnikovError> {
        let p = orbit.params;
        let src = endpoint_eq(orbit.kind, End::Left, p.a, p.gamma);
        let tgt = endpoint_eq(orbit.kind, End::Right, p.a, p.gamma);
        let s_src = hyperbolic_splitting(&src, &p)?;
        let s_tgt = hyperbolic_splitting(&tgt, &p)?;
        Ok(Self {
            h,
            p,
            left: gram_schmidt(&s_src.unstable),
            right: gram_schmidt(&s_tgt.stable),
        })
    }
}

impl Bvp for AdjointBvp<'_> {
    fn dim(&self) -> usize {
        3
    }
    fn rhs(&self, x: f64, y: &[f64], f: &mut [f64]) {
        let r = adjoint_rhs(self.h, &self.p, x, &[y[0], y[1], y[2]]);
        f.copy_from_slice(&r);
    }
    fn jac(&self, x: f64, _y: &[f64], j: &mut [f64]) {
        let hv = self.h.eval(x);
        let a = tw_jacobian(&[hv[0], hv[1], hv[2]], &self.p);
        for i in 0..3 {
            for k in 0..3 {
                j[i * 3 + k] = -a[k][i];
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

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Bounded adjoint solution along `h`, normalised to `|psi(0)| = 1` with a
/// provisional sign (first component of `psi(0)` positive); use
/// [`compute_adjoint_pair`] for the loop orientation.
pub fn compute_adjoint(h: &OrbitProfile) -> Result<AdjointProfile, MelnikovError> {
    if !matches!(h.kind, OrbitKind::Front | OrbitKind::Back) {
        return Err(MelnikovError::NotHeteroclinic(h.kind));
    }
    let herm = h.hermite();
    let prob = AdjointBvp::new(h, &herm)?;
    let zero = vec![0.0; 3 * h.mesh.len()];
    let jm = bvp::jacobian(&prob, &h.mesh, &zero)?;
    let ss = smallest_singular(jm, 30)?;
    if ss.sigma[1] < 100.0 * ss.sigma[0] {
        return Err(MelnikovError::KernelDimension { sigma: ss.sigma });
    }
    let i0 = h.mesh.iter().position(|&x| x == 0.0).ok_or(MelnikovError::NoAnchorNode)?;
    let v = &ss.right;
    let mut scale = 1.0 / norm(&v[3 * i0..3 * i0 + 3]);
    if v[3 * i0] < 0.0 {
        scale = -scale;
    }
    let values = (0..h.mesh.len())
        .map(|i| std::array::from_fn(|a| scale * v[3 * i + a]))
        .collect();
    let profile = OrbitProfile {
        kind: OrbitKind::Adjoint,
        params: h.params,
        mesh: h.mesh.clone(),
        values,
        tol: h.tol,
        bvp_residual: 0.0,
    };
    let mut adj = AdjointProfile { profile, parent: h.kind, orbit: h.clone(), sigma: ss.sigma };
    adj.profile.bvp_residual = adj.residual_with(&prob)?;
    Ok(adj)
}

impl AdjointProfile {
    fn residual_with(&self, prob: &AdjointBvp) -> Result<f64, MelnikovError> {
        let z: Vec<f64> = self.profile.values.iter().flatten().copied().collect();
        let r = bvp::residual(prob, &self.profile.mesh, &z)?;
        Ok(r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }

    fn flip(&mut self) {
        for v in &mut self.profile.values {
            for c in v.iter_mut() {
                *c = -*c;
            }
        }
    }
}

/// Largest `|<psi(x), h'(x)>|` over the mesh.
pub fn tangent_pairing(psi: &AdjointProfile, h: &OrbitProfile) -> f64 {
    psi.profile
        .values
        .iter()
        .zip(h.slopes())
        .map(|(a, b)| dot(a, &b).abs())
        .fold(0.0, f64::max)
}

/// Asymptotic limit of `e^{-sigma x} y(x)` at one end of a profile.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EndLimit {
    pub vector: [f64; 3],
    /// Log-slope of `|y|` fitted over the end window (signed, d ln|y| / dx).
    pub fitted_slope: f64,
    /// Position at which the limit was read off.
    pub x: f64,
}

/// `lim e^{-slope x} y(x)` at the given end, using the spectral `slope`; the
/// window is the outer 20% of nodes restricted to values above the noise floor.
/// With `correction = Some(k)` the scaled profile is fitted as
/// `w + c1 e^{-k |x|} + c2 e^{-2k |x|} + ...` over the window to remove
/// slowly decaying transients.
pub fn end_limit(mesh: &[f64], ys: &[[f64; 3]], slope: f64, left_end: bool, correction: Option<f64>) -> EndLimit {
    let n = mesh.len();
    let m = (n / 5).max(4);
    let peak = ys.iter().map(|y| norm(y)).fold(0.0, f64::max);
    let idx: Vec<usize> = if left_end { (0..m).collect() } else { (n - m..n).collect() };
    let good: Vec<usize> = idx.into_iter().filter(|&i| norm(&ys[i]) > 1e-9 * peak).collect();
    let pick = if left_end { good.first() } else { good.last() };
    let i = pick.copied().unwrap_or(if left_end { m } else { n - 1 - m });
    let (sx, sy, sxx, sxy, k) = good.iter().fold((0.0, 0.0, 0.0, 0.0, 0.0), |acc, &j| {
        let (x, l) = (mesh[j], norm(&ys[j]).ln());
        (acc.0 + x, acc.1 + l, acc.2 + x * x, acc.3 + x * l, acc.4 + 1.0)
    });
    let fitted_slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
    let scaled = |j: usize| ys[j].map(|v| v * (-slope * mesh[j]).exp());
    let vector = match correction {
        Some(kappa) => {
            // the transient fit tolerates a lower floor than the point read-off
            let idx = if left_end { 0..m } else { n - m..n };
            let good: Vec<usize> = idx.filter(|&i| norm(&ys[i]) > 1e-12 * peak).collect();
            if good.len() < 3 * FIT_TERMS {
                return EndLimit { vector: scaled(i), fitted_slope, x: mesh[i] };
            }
            // least squares for w + sum_k c_k e^{-k kappa |x|}, per component
            let basis = |x: f64| -> [f64; FIT_TERMS] {
                let e = (-kappa * x.abs()).exp();
                std::array::from_fn(|k| e.powi(k as i32))
            };
            let mut g = [[0.0; FIT_TERMS]; FIT_TERMS];
            let mut rhs = [[0.0; FIT_TERMS]; 3];
            for &j in &good {
                let b = basis(mesh[j]);
                let y = scaled(j);
                for r in 0..FIT_TERMS {
                    for c in 0..FIT_TERMS {
                        g[r][c] += b[r] * b[c];
                    }
                    for a in 0..3 {
                        rhs[a][r] += b[r] * y[a];
                    }
                }
            }
            std::array::from_fn(|a| solve_small(g, rhs[a])[0])
        }
        None => scaled(i),
    };
    EndLimit { vector, fitted_slope, x: mesh[i] }
}

/// Number of basis functions in the end-limit transient fit.
const FIT_TERMS: usize = 4;

/// Gaussian elimination with partial pivoting.
fn solve_small<const N: usize>(mut m: [[f64; N]; N], mut b: [f64; N]) -> [f64; N] {
    for col in 0..N {
        let p = (col..N).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, p);
        b.swap(col, p);
        for r in col + 1..N {
            let f = m[r][col] / m[col][col];
            for c in col..N {
                m[r][c] -= f * m[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for r in (0..N).rev() {
        x[r] = (b[r] - (r + 1..N).map(|c| m[r][c] * x[c]).sum::<f64>()) / m[r][r];
    }
    x
}

/// Leading rates at e1 and e2: `[[alpha_1^s, alpha_1^u], [alpha_2^s, alpha_2^u]]`.
pub fn leading_rates(p: &ModelParams) -> Result<[[f64; 2]; 2], MelnikovError> {
    let (e1, e2) = outer_equilibria(p.a, p.gamma)?;
    let s1 = spectral_split(&e1, p)?;
    let s2 = spectral_split(&e2, p)?;
    Ok([[s1.alpha_s, s1.alpha_u], [s2.alpha_s, s2.alpha_u]])
}

/// Limit vectors; index 0 belongs to e1, index 1 to e2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitVectors {
    pub v_plus: [EndLimit; 2],
    pub v_minus: [EndLimit; 2],
    pub w_plus: [EndLimit; 2],
    pub w_minus: [EndLimit; 2],
    pub rates: [[f64; 2]; 2],
}

impl LimitVectors {
    /// `<w_i^+, v_i^+>` and `<w_i^-, v_i^->` for i = 1, 2.
    pub fn pairings(&self) -> ([f64; 2], [f64; 2]) {
        let s = [0, 1].map(|i| dot(&self.w_plus[i].vector, &self.v_plus[i].vector));
        let u = [0, 1].map(|i| dot(&self.w_minus[i].vector, &self.v_minus[i].vector));
        (s, u)
    }
}

pub fn limit_vectors(
    h1: &OrbitProfile,
    h2: &OrbitProfile,
    psi1: &AdjointProfile,
    psi2: &AdjointProfile,
) -> Result<LimitVectors, MelnikovError> {
    let rates = leading_rates(&h1.params)?;
    let [[a1s, a1u], [a2s, a2u]] = rates;
    let d1 = h1.slopes();
    let d2 = h2.slopes();
    let (p1, p2) = (&psi1.profile.values, &psi2.profile.values);
    Ok(LimitVectors {
        // h_i' ~ v_i^- e^{alpha_i^u x} at -inf, h_i' ~ v_{i+1}^+ e^{-alpha_{i+1}^s x} at +inf
        v_minus: [end_limit(&h1.mesh, &d1, a1u, true, None), end_limit(&h2.mesh, &d2, a2u, true, None)],
        v_plus: [end_limit(&h2.mesh, &d2, -a1s, false, None), end_limit(&h1.mesh, &d1, -a2s, false, None)],
        // psi_i ~ w_i^+ e^{alpha_i^s x} at -inf, psi_i ~ w_{i+1}^- e^{-alpha_{i+1}^u x} at +inf
        w_plus: [end_limit(&h1.mesh, p1, a1s, true, None), end_limit(&h2.mesh, p2, a2s, true, None)],
        // psi_i at +inf still feels h_i - e_{i+1} ~ e^{-alpha_{i+1}^s x}
        w_minus: [
            end_limit(&h2.mesh, p2, -a1u, false, Some(a1s)),
            end_limit(&h1.mesh, p1, -a2u, false, Some(a2s)),
        ],
        rates,
    })
}

/// Computes both adjoints and fixes their signs so that `<w_i^+, v_i^+> > 0`.
pub fn compute_adjoint_pair(
    h1: &OrbitProfile,
    h2: &OrbitProfile,
) -> Result<(AdjointProfile, AdjointProfile), MelnikovError> {
    if h1.params != h2.params {
        return Err(MelnikovError::Mismatch);
    }
    let mut psi1 = compute_adjoint(h1)?;
    let mut psi2 = compute_adjoint(h2)?;
    orient_pair(h1, h2, &mut psi1, &mut psi2)?;
    Ok((psi1, psi2))
}

pub fn orient_pair(
    h1: &OrbitProfile,
    h2: &OrbitProfile,
    psi1: &mut AdjointProfile,
    psi2: &mut AdjointProfile,
) -> Result<(), MelnikovError> {
    let lv = limit_vectors(h1, h2, psi1, psi2)?;
    let (s, _) = lv.pairings();
    if s[0] < 0.0 {
        psi1.flip();
    }
    if s[1] < 0.0 {
        psi2.flip();
    }
    Ok(())
}

/// Quadrature rule on each mesh interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    /// Simpson with Hermite midpoints; integrand built from the vector field.
    Simpson,
    /// 3-point Gauss with the Hermite derivative of `h`.
    Gauss3,
}

/// `int <psi, g(x)> dx` over the mesh with each interval split into `sub` pieces.
/// `g` receives the state `h(x)` and its interpolated derivative.
fn integrate(
    psi: &Hermite,
    h: &Hermite,
    rule: Rule,
    sub: usize,
    g: &dyn Fn(&[f64; 3], &[f64; 3]) -> [f64; 3],
) -> f64 {
    let mesh = &h.x;
    let (mut hv, mut hd) = ([0.0; 3], [0.0; 3]);
    let (mut pv, mut pd) = ([0.0; 3], [0.0; 3]);
    let mut eval = |x: f64| -> f64 {
        h.eval_into(x, &mut hv, &mut hd);
        psi.eval_into(x, &mut pv, &mut pd);
        dot(&pv, &g(&hv, &hd))
    };
    let gl = [(-(0.6f64).sqrt(), 5.0 / 9.0), (0.0, 8.0 / 9.0), ((0.6f64).sqrt(), 5.0 / 9.0)];
    let mut total = 0.0;
    for w in mesh.windows(2) {
        let step = (w[1] - w[0]) / sub as f64;
        for k in 0..sub {
            let a = w[0] + k as f64 * step;
            let b = a + step;
            total += match rule {
                Rule::Simpson => step / 6.0 * (eval(a) + 4.0 * eval(0.5 * (a + b)) + eval(b)),
                Rule::Gauss3 => {
                    let m = 0.5 * (a + b);
                    gl.iter().map(|(t, wt)| wt * eval(m + 0.5 * step * t)).sum::<f64>() * 0.5 * step
                }
            };
        }
    }
    total
}

/// Integral with error estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
}

fn tail_bound(psi: &AdjointProfile, h: &OrbitProfile, g: &dyn Fn(&[f64; 3], &[f64; 3]) -> [f64; 3], rate: f64) -> f64 {
    let d = h.slopes();
    let n = h.mesh.len();
    let ends = [0, n - 1];
    ends.iter()
        .map(|&i| dot(&psi.profile.values[i], &g(&h.values[i], &d[i])).abs() / rate)
        .sum()
}

fn integral_of(
    psi: &AdjointProfile,
    h: &OrbitProfile,
    name: &'static str,
    g: &dyn Fn(&[f64; 3], &[f64; 3]) -> [f64; 3],
    sub: usize,
) -> Result<Integral, MelnikovError> {
    let ph = psi.hermite();
    let hh = h.hermite();
    let simpson = integrate(&ph, &hh, Rule::Simpson, sub, g);
    let gauss = integrate(&ph, &hh, Rule::Gauss3, sub, g);
    let rates = leading_rates(&h.params)?;
    let rate = rates.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let error = (simpson - gauss).abs() + tail_bound(psi, h, g, rate);
    if !(error <= simpson.abs() / 10.0) {
        return Err(MelnikovError::Unreliable { name, value: simpson, error });
    }
    Ok(Integral { value: simpson, error })
}

/// `M = int <psi, B h'> dx`.
pub fn melnikov_lambda(psi: &AdjointProfile, h: &OrbitProfile) -> Result<Integral, MelnikovError> {
    melnikov_lambda_refined(psi, h, 1)
}

/// As [`melnikov_lambda`] with every mesh interval split into `sub` pieces.
pub fn melnikov_lambda_refined(psi: &AdjointProfile, h: &OrbitProfile, sub: usize) -> Result<Integral, MelnikovError> {
    let b = coupling_matrix(h.params.c);
    let g = move |_: &[f64; 3], d: &[f64; 3]| -> [f64; 3] {
        std::array::from_fn(|i| (0..3).map(|k| b[i][k] * d[k]).sum())
    };
    integral_of(psi, h, "M", &g, sub)
}

/// `int <psi, d_mu F(h)> dx` for `mu = (gamma, c)`, evaluated from the states
/// rather than the interpolated derivative.
pub fn melnikov_params(psi: &AdjointProfile, h: &OrbitProfile) -> Result<[Integral; 2], MelnikovError> {
    let p = h.params;
    let gg = move |y: &[f64; 3], _: &[f64; 3]| tw_param_derivs(y, &p)[0];
    let gc = move |y: &[f64; 3], _: &[f64; 3]| tw_param_derivs(y, &p)[1];
    let ng = if p.epsilon == 0.0 {
        Integral { value: 0.0, error: 0.0 }
    } else {
        integral_of(psi, h, "N_gamma", &gg, 1)?
    };
    Ok([ng, integral_of(psi, h, "N_c", &gc, 1)?])
}

/// Same integrand as the c-component of [`melnikov_params`], but through the
/// Hermite derivative of `h` and Gauss quadrature.
pub fn melnikov_c_via_derivative(psi: &AdjointProfile, h: &OrbitProfile) -> f64 {
    let b = coupling_matrix(h.params.c);
    let g = move |_: &[f64; 3], d: &[f64; 3]| -> [f64; 3] {
        std::array::from_fn(|i| (0..3).map(|k| b[i][k] * d[k]).sum())
    };
    integrate(&psi.hermite(), &h.hermite(), Rule::Gauss3, 1, &g)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelnikovData {
    pub m: [f64; 2],
    pub m_error: [f64; 2],
    /// Rows N_1, N_2; columns (gamma, c).
    pub n: [[f64; 2]; 2],
    pub n_error: [[f64; 2]; 2],
    pub det_n: f64,
    pub det_n_error: f64,
}

pub fn melnikov_data(
    h1: &OrbitProfile,
    h2: &OrbitProfile,
    psi1: &AdjointProfile,
    psi2: &AdjointProfile,
) -> Result<MelnikovData, MelnikovError> {
    let m1 = melnikov_lambda(psi1, h1)?;
    let m2 = melnikov_lambda(psi2, h2)?;
    let n1 = melnikov_params(psi1, h1)?;
    let n2 = melnikov_params(psi2, h2)?;
    let n = [[n1[0].value, n1[1].value], [n2[0].value, n2[1].value]];
    let ne = [[n1[0].error, n1[1].error], [n2[0].error, n2[1].error]];
    let det_n = n[0][0] * n[1][1] - n[0][1] * n[1][0];
    let det_n_error = ne[0][0] * n[1][1].abs()
        + n[0][0].abs() * ne[1][1]
        + ne[0][1] * n[1][0].abs()
        + n[0][1].abs() * ne[1][0];
    Ok(MelnikovData {
        m: [m1.value, m2.value],
        m_error: [m1.error, m2.error],
        n,
        n_error: ne,
        det_n,
        det_n_error,
    })
}

/// The four boundary inner products, named after their asymptotic partners:
/// `s[0] = <psi1(-L1), h2'(L2)>`, `s[1] = <psi2(-L2), h1'(L1)>`,
/// `u[0] = <psi2(L2), h1'(-L1)>`, `u[1] = <psi1(L1), h2'(-L2)>`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ProductSet {
    pub s: [f64; 2],
    pub u: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryProducts {
    pub l1: f64,
    pub l2: f64,
    pub exact: ProductSet,
    /// `S_i = e^{-alpha_i^s (L1+L2)} <w_i^+, v_i^+>`, `U_i` likewise.
    pub asymptotic: ProductSet,
    pub limits: LimitVectors,
}

impl BoundaryProducts {
    /// Relative gaps between exact products and their asymptotic surrogates.
    pub fn relative_gaps(&self) -> ProductSet {
        let r = |e: f64, a: f64| ((e - a) / a).abs();
        ProductSet {
            s: [r(self.exact.s[0], self.asymptotic.s[0]), r(self.exact.s[1], self.asymptotic.s[1])],
            u: [r(self.exact.u[0], self.asymptotic.u[0]), r(self.exact.u[1], self.asymptotic.u[1])],
        }
    }
}

fn at(h: &Hermite, x: f64) -> Result<([f64; 3], [f64; 3]), MelnikovError> {
    let (lo, hi) = (h.x[0], *h.x.last().unwrap());
    if x < lo || x > hi {
        return Err(MelnikovError::OutOfRange { x, lo, hi });
    }
    let (mut v, mut d) = ([0.0; 3], [0.0; 3]);
    h.eval_into(x, &mut v, &mut d);
    Ok((v, d))
}

pub fn boundary_products(
    psi1: &AdjointProfile,
    psi2: &AdjointProfile,
    h1: &OrbitProfile,
    h2: &OrbitProfile,
    l1: f64,
    l2: f64,
) -> Result<BoundaryProducts, MelnikovError> {
    let (hh1, hh2) = (h1.hermite(), h2.hermite());
    let (ph1, ph2) = (psi1.hermite(), psi2.hermite());
    let p = h1.params;
    let hd = |h: &Hermite, x: f64| -> Result<[f64; 3], MelnikovError> {
        let (v, _) = at(h, x)?;
        Ok(tw_vector_field(&v, &p))
    };
    let pv = |h: &Hermite, x: f64| -> Result<[f64; 3], MelnikovError> { Ok(at(h, x)?.0) };
    let exact = ProductSet {
        s: [
            dot(&pv(&ph1, -l1)?, &hd(&hh2, l2)?),
            dot(&pv(&ph2, -l2)?, &hd(&hh1, l1)?),
        ],
        u: [
            dot(&pv(&ph2, l2)?, &hd(&hh1, -l1)?),
            dot(&pv(&ph1, l1)?, &hd(&hh2, -l2)?),
        ],
    };
    let limits = limit_vectors(h1, h2, psi1, psi2)?;
    let (ws, wu) = limits.pairings();
    let big_l = l1 + l2;
    let r = limits.rates;
    let asymptotic = ProductSet {
        s: [(-r[0][0] * big_l).exp() * ws[0], (-r[1][0] * big_l).exp() * ws[1]],
        u: [(-r[0][1] * big_l).exp() * wu[0], (-r[1][1] * big_l).exp() * wu[1]],
    };
    Ok(BoundaryProducts { l1, l2, exact, asymptotic, limits })
}

/// Angle between two directions, insensitive to sign.
pub fn direction_angle(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (dot(a, b).abs() / (norm(a) * norm(b))).min(1.0).acos()
}
