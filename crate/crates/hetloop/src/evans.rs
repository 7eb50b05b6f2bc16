//! Reduced determinant `E(lambda, xi)` of the loop and the critical curve
//! `lambda(xi)` near the origin.

use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::melnikov::{BoundaryProducts, MelnikovData, ProductSet};

type C = Complex64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvansError {
    #[error("denominator margin {margin:e} below {required:e}")]
    Denominator { margin: f64, required: f64 },
    #[error("need at least 7 grid points with |xi| <= pi/(4T), found {0}")]
    TooFewPoints(usize),
    #[error("tangency fit residual {residual:e} exceeds {limit:e}")]
    FitResidual { residual: f64, limit: f64 },
    #[error("xi grid must have an odd number (>= 3) of points, got {0}")]
    BadGrid(usize),
    #[error("|lambda| = {0} outside the smallness radius")]
    OutsideRadius(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseTag {
    General,
    EqualLeadingRates,
    DominatedRate,
}

/// Everything the reduced determinant needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedEvansData {
    pub period: f64,
    pub l1: f64,
    pub l2: f64,
    /// Boundary inner products at (L1, L2).
    pub exact: ProductSet,
    /// `<w_i^+, v_i^+>` and `<w_i^-, v_i^->`.
    pub pair_s: [f64; 2],
    pub pair_u: [f64; 2],
    /// `[[alpha_1^s, alpha_1^u], [alpha_2^s, alpha_2^u]]`.
    pub rates: [[f64; 2]; 2],
    pub m: [f64; 2],
    pub case_tag: CaseTag,
    /// Rates lie close to the equal/dominated threshold.
    pub gray_zone: bool,
}

/// Relative threshold separating equal from dominated leading rates.
pub const RATE_THRESHOLD: f64 = 0.05;

/// Classification of the leading stable rates; the second value flags the
/// band `[0.5, 2] x threshold` where both limiting formulas are emitted.
pub fn classify(rates: &[[f64; 2]; 2]) -> (CaseTag, bool) {
    let [[a1s, a1u], [a2s, a2u]] = *rates;
    let big = a1s.max(a2s);
    let diff = (a1s - a2s).abs();
    let gray = diff >= 0.5 * RATE_THRESHOLD * big && diff <= 2.0 * RATE_THRESHOLD * big;
    if !(a1s < a1u && a2s < a2u) {
        return (CaseTag::General, false);
    }
    if diff <= RATE_THRESHOLD * big {
        (CaseTag::EqualLeadingRates, gray)
    } else {
        (CaseTag::DominatedRate, gray)
    }
}

impl ReducedEvansData {
    pub fn new(bp: &BoundaryProducts, md: &MelnikovData, period: f64) -> Self {
        let (pair_s, pair_u) = bp.limits.pairings();
        let (case_tag, gray_zone) = classify(&bp.limits.rates);
        Self {
            period,
            l1: bp.l1,
            l2: bp.l2,
            exact: bp.exact,
            pair_s,
            pair_u,
            rates: bp.limits.rates,
            m: md.m,
            case_tag,
            gray_zone,
        }
    }

    /// `S_i`, `U_i` from the limit vectors.
    pub fn asymptotic(&self) -> ProductSet {
        let l = self.l1 + self.l2;
        let r = self.rates;
        ProductSet {
            s: [(-r[0][0] * l).exp() * self.pair_s[0], (-r[1][0] * l).exp() * self.pair_s[1]],
            u: [(-r[0][1] * l).exp() * self.pair_u[0], (-r[1][1] * l).exp() * self.pair_u[1]],
        }
    }

    /// Coefficient of `-lambda` in `E` built from a product set.
    fn denominator_of(&self, p: &ProductSet) -> (f64, f64) {
        let [m1, m2] = self.m;
        let den = (p.s[1] - p.u[0]) * m1 + (p.s[0] - p.u[1]) * m2;
        let scale = (p.s[1].abs() + p.u[0].abs()) * m1.abs() + (p.s[0].abs() + p.u[1].abs()) * m2.abs();
        (den, scale)
    }

    /// `(S_2 - U_1) M_1 + (S_1 - U_2) M_2` and its relative margin.
    pub fn denominator(&self) -> (f64, f64) {
        let (d, s) = self.denominator_of(&self.asymptotic());
        (d, if s > 0.0 { d.abs() / s } else { 0.0 })
    }
}

fn phase(xi: f64, t: f64) -> C {
    C::from_polar(1.0, xi * t)
}

/// Truncated reduced determinant with exact boundary products.
pub fn evaluate_e(lambda: C, xi: f64, data: &ReducedEvansData) -> C {
    let p = &data.exact;
    let z = phase(xi, data.period);
    let one = C::new(1.0, 0.0);
    let [m1, m2] = data.m;
    (one - z) * (p.u[0] * p.u[1])
        + (one - z.conj()) * (p.s[0] * p.s[1])
        - lambda * ((p.s[1] - p.u[0]) * m1)
        - lambda * ((p.s[0] - p.u[1]) * m2)
}

/// Leading part of the full 2x2 determinant `A11 A22 - A12 A21`: the truncated
/// `E` plus the `lambda^2 M1 M2` term, which is of the same exponential order
/// as the boundary products whenever `lambda` is.
pub fn evaluate_e_quadratic(lambda: C, xi: f64, data: &ReducedEvansData) -> C {
    evaluate_e(lambda, xi, data) + lambda * lambda * (data.m[0] * data.m[1])
}

/// Coefficient `B` of `-lambda` in `E`, from the exact products.
fn exact_linear_coefficient(data: &ReducedEvansData) -> f64 {
    let p = &data.exact;
    (p.s[1] - p.u[0]) * data.m[0] + (p.s[0] - p.u[1]) * data.m[1]
}

/// Both roots of the quadratic determinant, critical branch first (the one
/// that vanishes at `xi = 0`).
pub fn quadratic_roots(xi: f64, data: &ReducedEvansData) -> [C; 2] {
    let a = data.m[0] * data.m[1];
    let b = exact_linear_coefficient(data);
    let c = evaluate_e(C::new(0.0, 0.0), xi, data);
    // a l^2 - b l + c = 0; the stable form avoids cancellation for the small root
    let disc = (C::new(b * b, 0.0) - 4.0 * a * c).sqrt();
    let big = (b + disc * b.signum()) / (2.0 * a);
    let small = if big.norm() > 0.0 { c / (a * big) } else { C::new(0.0, 0.0) };
    [small, big]
}

/// Non-zero root at `xi = 0`: the relative translation mode of the two interfaces.
pub fn interface_eigenvalue(data: &ReducedEvansData) -> f64 {
    exact_linear_coefficient(data) / (data.m[0] * data.m[1])
}

/// `(b, d)` of the critical branch of the quadratic determinant.
pub fn quadratic_tangency(data: &ReducedEvansData) -> (f64, f64) {
    let t = data.period;
    let p = &data.exact;
    let bl = exact_linear_coefficient(data);
    let (ss, uu) = (p.s[0] * p.s[1], p.u[0] * p.u[1]);
    let b = t * (ss - uu) / bl;
    let d = -t * t * (uu + ss) / (2.0 * bl);
    (b, d + b * b / interface_eigenvalue(data))
}

/// Leading-order closed form built from the asymptotic products.
pub fn closed_form_general(xi: f64, data: &ReducedEvansData) -> C {
    let a = data.asymptotic();
    let z = phase(xi, data.period);
    let (den, _) = data.denominator_of(&a);
    (C::new(1.0, 0.0) - z) * (C::new(a.u[0] * a.u[1], 0.0) - z.conj() * (a.s[0] * a.s[1])) / den
}

/// Real factor `q` of the limiting forms `lambda = (1 - e^{-i xi T}) q`.
fn limit_factor(data: &ReducedEvansData, tag: CaseTag) -> f64 {
    let l = data.l1 + data.l2;
    let [m1, m2] = data.m;
    let [p1, p2] = data.pair_s;
    match tag {
        CaseTag::DominatedRate => {
            // the equilibrium with the larger stable rate controls the eigenvalue
            let k = if data.rates[0][0] < data.rates[1][0] { 1 } else { 0 };
            (-data.rates[k][0] * l).exp() * data.pair_s[k] / data.m[k]
        }
        _ => (-data.rates[0][0] * l).exp() * (p1 * p2 / (p2 * m1 + p1 * m2)),
    }
}

/// Equal leading stable rates.
pub fn closed_form_equal(xi: f64, data: &ReducedEvansData) -> C {
    (C::new(1.0, 0.0) - phase(xi, data.period).conj()) * limit_factor(data, CaseTag::EqualLeadingRates)
}

/// One leading stable rate strictly smaller than the other.
pub fn closed_form_dominated(xi: f64, data: &ReducedEvansData) -> C {
    (C::new(1.0, 0.0) - phase(xi, data.period).conj()) * limit_factor(data, CaseTag::DominatedRate)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LambdaSolution {
    pub xi: f64,
    /// Closed form selected by the case tag.
    pub closed: C,
    /// The general formula when the case tag picks a limiting case.
    pub general: C,
    /// Other limiting formula, inside the gray zone only.
    pub alternate: Option<C>,
    /// Newton root of the truncated determinant seeded by `closed`.
    pub newton: C,
    pub newton_iterations: usize,
    /// Critical root of the quadratic determinant.
    pub quadratic: C,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Smallness radius for `|lambda|`.
    pub radius: f64,
    /// Required relative denominator margin.
    pub min_margin: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { radius: 0.1, min_margin: 1e-6 }
    }
}

/// Complex Newton on `E` with a finite-difference derivative.
pub fn newton_root(xi: f64, data: &ReducedEvansData, seed: C) -> (C, usize) {
    let mut z = seed;
    for it in 1..=30 {
        let f = evaluate_e(z, xi, data);
        let h = 1e-6 * (z.norm() + 1e-12);
        let df = (evaluate_e(z + h, xi, data) - evaluate_e(z - h, xi, data)) / (2.0 * h);
        if df.norm() == 0.0 {
            return (z, it);
        }
        let dz = f / df;
        z -= dz;
        if dz.norm() <= 1e-15 * z.norm() || dz.norm() == 0.0 {
            return (z, it);
        }
    }
    (z, 30)
}

pub fn solve_lambda(xi: f64, data: &ReducedEvansData, opts: &SolveOptions) -> Result<LambdaSolution, EvansError> {
    let (_, margin) = data.denominator();
    if !(margin >= opts.min_margin) {
        return Err(EvansError::Denominator { margin, required: opts.min_margin });
    }
    let general = closed_form_general(xi, data);
    let (closed, alternate) = match data.case_tag {
        CaseTag::General => (general, None),
        CaseTag::EqualLeadingRates => {
            (closed_form_equal(xi, data), data.gray_zone.then(|| closed_form_dominated(xi, data)))
        }
        CaseTag::DominatedRate => {
            (closed_form_dominated(xi, data), data.gray_zone.then(|| closed_form_equal(xi, data)))
        }
    };
    if closed.norm() > opts.radius {
        return Err(EvansError::OutsideRadius(closed.norm()));
    }
    let (newton, newton_iterations) = if xi == 0.0 {
        (C::new(0.0, 0.0), 0)
    } else {
        newton_root(xi, data, closed)
    };
    let quadratic = quadratic_roots(xi, data)[0];
    Ok(LambdaSolution { xi, closed, general, alternate, newton, newton_iterations, quadratic })
}

/// Uniform grid of `n` (odd) points in `[-pi/T, pi/T)` containing 0.
pub fn xi_grid(period: f64, n: usize) -> Result<Vec<f64>, EvansError> {
    if n < 3 || n % 2 == 0 {
        return Err(EvansError::BadGrid(n));
    }
    let h = 2.0 * std::f64::consts::PI / (period * n as f64);
    let k = (n as i64 - 1) / 2;
    Ok((-k..=k).map(|j| j as f64 * h).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalCurveAnalytic {
    pub period: f64,
    pub xi: Vec<f64>,
    pub closed: Vec<C>,
    pub newton: Vec<C>,
    pub quadratic: Vec<C>,
    /// `(b, d)` of the closed form at `xi = 0`.
    pub analytic_bd: (f64, f64),
    pub quadratic_bd: (f64, f64),
    pub interface_eigenvalue: f64,
    pub case_tag: CaseTag,
}

/// `(b, d)` of the closed form in the case tag's leading-order model.
pub fn analytic_tangency(data: &ReducedEvansData) -> (f64, f64) {
    let t = data.period;
    match data.case_tag {
        CaseTag::General => {
            let a = data.asymptotic();
            let (den, _) = data.denominator_of(&a);
            let (ss, uu) = (a.s[0] * a.s[1], a.u[0] * a.u[1]);
            (t * (ss - uu) / den, -t * t * (uu + ss) / (2.0 * den))
        }
        tag => {
            // (1 - e^{-i xi T}) q = i T q xi + T^2 q xi^2 / 2 + ...
            let q = limit_factor(data, tag);
            (t * q, -t * t * q / 2.0)
        }
    }
}

pub fn critical_curve(data: &ReducedEvansData, n: usize, opts: &SolveOptions) -> Result<CriticalCurveAnalytic, EvansError> {
    let xi = xi_grid(data.period, n)?;
    let mut closed = Vec::with_capacity(n);
    let mut newton = Vec::with_capacity(n);
    let mut quadratic = Vec::with_capacity(n);
    for &x in &xi {
        let s = solve_lambda(x, data, opts)?;
        closed.push(s.closed);
        newton.push(s.newton);
        quadratic.push(s.quadratic);
    }
    Ok(CriticalCurveAnalytic {
        period: data.period,
        xi,
        closed,
        newton,
        quadratic,
        analytic_bd: analytic_tangency(data),
        quadratic_bd: quadratic_tangency(data),
        interface_eigenvalue: interface_eigenvalue(data),
        case_tag: data.case_tag,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TangencyFit {
    pub b: f64,
    pub d: f64,
    /// RMS misfit relative to the largest |lambda| in the window.
    pub residual: f64,
    pub points: usize,
}

/// Least-squares fit `lambda(xi) ~ i b xi - d xi^2` on `|xi| <= pi/(4T)`.
pub fn tangency_coefficients(
    xi: &[f64],
    lambda: &[C],
    period: f64,
    max_residual: f64,
) -> Result<TangencyFit, EvansError> {
    let cut = std::f64::consts::PI / period / 4.0 * (1.0 + 1e-12);
    let pts: Vec<(f64, C)> = xi
        .iter()
        .zip(lambda)
        .filter(|(x, _)| x.abs() <= cut)
        .map(|(x, l)| (*x, *l))
        .collect();
    if pts.len() < 7 {
        return Err(EvansError::TooFewPoints(pts.len()));
    }
    let (mut sxx, mut sxi, mut s44, mut s2r) = (0.0, 0.0, 0.0, 0.0);
    for (x, l) in &pts {
        sxx += x * x;
        sxi += x * l.im;
        s44 += x.powi(4);
        s2r += x * x * l.re;
    }
    let b = sxi / sxx;
    let d = -s2r / s44;
    let peak = pts.iter().map(|(_, l)| l.norm()).fold(0.0, f64::max);
    let ms = pts
        .iter()
        .map(|(x, l)| (l - C::new(-d * x * x, b * x)).norm_sqr())
        .sum::<f64>()
        / pts.len() as f64;
    let residual = if peak > 0.0 { ms.sqrt() / peak } else { 0.0 };
    if residual > max_residual {
        return Err(EvansError::FitResidual { residual, limit: max_residual });
    }
    Ok(TangencyFit { b, d, residual, points: pts.len() })
}

/// Rows `xi,re,im,source` for both the closed form and the Newton root.
pub fn curve_csv(curve: &CriticalCurveAnalytic) -> String {
    let mut s = String::from("xi,re_lambda,im_lambda,source\n");
    for (k, x) in curve.xi.iter().enumerate() {
        writeln!(s, "{:e},{:e},{:e},closed_form", x, curve.closed[k].re, curve.closed[k].im).unwrap();
        writeln!(s, "{:e},{:e},{:e},newton", x, curve.newton[k].re, curve.newton[k].im).unwrap();
        writeln!(s, "{:e},{:e},{:e},quadratic", x, curve.quadratic[k].re, curve.quadratic[k].im).unwrap();
    }
    s
}
