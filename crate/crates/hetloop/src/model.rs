//! FitzHugh–Nagumo kinetics, the travelling-wave vector field and the
//! spectral data of its equilibria.
//!
//! State in the co-moving frame is `(u, v, w)` with `v = u'`:
//!
//! ```text
//! u' = v
//! v' = c v - f(u) + w
//! w' = (eps / c) (u - gamma w)
//! ```

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eig3::{self, Eigen3};

/// Default upper bound for the singular-perturbation parameter.
pub const EPS_STAR: f64 = 0.05;

/// Relative tolerance for treating an eigenvalue as real.
pub const REAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("degenerate equilibrium: double root of f(u) = u/gamma near u = {u}")]
    DegenerateEquilibrium { u: f64 },
    #[error("equilibrium at u = {u} is not hyperbolic (eigenvalue {re} + {im}i)")]
    NonHyperbolic { u: f64, re: f64, im: f64 },
    #[error("leading {side} eigenvalue at u = {u} is complex ({re} + {im}i)")]
    LeadingComplex {
        side: &'static str,
        u: f64,
        re: f64,
        im: f64,
    },
    #[error("leading {side} eigenvalue at u = {u} is not simple (gap {gap:e})")]
    LeadingNotSimple { side: &'static str, u: f64, gap: f64 },
    #[error("eigenvalues of the Jacobian at u = {u} could not be computed")]
    EigenFailure { u: f64 },
    #[error("expected 1 {side} direction at u = {u}, found {found}")]
    WrongSplitting {
        side: &'static str,
        u: f64,
        found: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub a: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub c: f64,
}

impl ModelParams {
    /// Validated constructor. `epsilon = 0` is accepted (singular limit).
    pub fn new(a: f64, gamma: f64, epsilon: f64, c: f64) -> Result<Self, ModelError> {
        let p = Self { a, gamma, epsilon, c };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |name, value, reason| Err(ModelError::InvalidParameter { name, value, reason });
        if !(self.a > 0.0 && self.a < 0.5) {
            return bad("a", self.a, "must lie in (0, 1/2)");
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad("gamma", self.gamma, "must be positive");
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad("epsilon", self.epsilon, "must be non-negative");
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            return bad("c", self.c, "must be positive");
        }
        Ok(())
    }

    pub fn with_gamma_c(&self, gamma: f64, c: f64) -> Self {
        Self { gamma, c, ..*self }
    }
}

/// f(u) = u (1 - u) (u - a).
#[inline]
pub fn reaction(u: f64, a: f64) -> f64 {
    u * (1.0 - u) * (u - a)
}

#[inline]
pub fn reaction_deriv(u: f64, a: f64) -> f64 {
    -3.0 * u * u + 2.0 * (1.0 + a) * u - a
}

#[inline]
pub fn reaction_deriv2(u: f64, a: f64) -> f64 {
    -6.0 * u + 2.0 * (1.0 + a)
}

pub fn tw_vector_field(y: &[f64; 3], p: &ModelParams) -> [f64; 3] {
    let [u, v, w] = *y;
    [
        v,
        p.c * v - reaction(u, p.a) + w,
        p.epsilon / p.c * (u - p.gamma * w),
    ]
}

pub fn tw_jacobian(y: &[f64; 3], p: &ModelParams) -> [[f64; 3]; 3] {
    let r = p.epsilon / p.c;
    [
        [0.0, 1.0, 0.0],
        [-reaction_deriv(y[0], p.a), p.c, 1.0],
        [r, 0.0, -r * p.gamma],
    ]
}

/// Partial derivatives of the vector field with respect to `(gamma, c)`.
pub fn tw_param_derivs(y: &[f64; 3], p: &ModelParams) -> [[f64; 3]; 2] {
    let [u, v, w] = *y;
    let c = p.c;
    [
        [0.0, 0.0, -p.epsilon / c * w],
        [0.0, v, -p.epsilon / (c * c) * (u - p.gamma * w)],
    ]
}

/// Matrix multiplying lambda in the first-order form of the linearised
/// eigenvalue problem.
pub fn coupling_matrix(c: f64) -> [[f64; 3]; 3] {
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0 / c]]
}

/// Roots of f(u) = u / gamma lifted to `(u, 0, u / gamma)`, sorted by `u`.
/// Only the kinetics are used, so this is independent of `epsilon` and `c`.
pub fn equilibrium_points(a: f64, gamma: f64) -> Result<Vec<[f64; 3]>, ModelError> {
    let mut us = vec![0.0];
    // u^2 - (1 + a) u + (a + 1/gamma) = 0
    let b = 1.0 + a;
    let q = a + 1.0 / gamma;
    let disc = b * b - 4.0 * q;
    let scale = b * b;
    if disc.abs() <= 1e-13 * scale {
        return Err(ModelError::DegenerateEquilibrium { u: b / 2.0 });
    }
    if disc > 0.0 {
        let s = disc.sqrt();
        // stable form of the quadratic roots
        let big = 0.5 * (b + s);
        let small = q / big;
        us.push(small);
        us.push(big);
    }
    us.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(us.into_iter().map(|u| [u, 0.0, u / gamma]).collect())
}

/// All equilibria of the travelling-wave field, each checked for hyperbolicity.
pub fn find_equilibria(p: &ModelParams) -> Result<Vec<[f64; 3]>, ModelError> {
    p.validate()?;
    let pts = equilibrium_points(p.a, p.gamma)?;
    for pt in &pts {
        let eig = eig3::eigen(&tw_jacobian(pt, p));
        if eig.values.iter().any(|z| !z.re.is_finite()) {
            return Err(ModelError::EigenFailure { u: pt[0] });
        }
        for nu in eig.values {
            if nu.re.abs() <= REAL_TOL * (1.0 + nu.norm()) {
                return Err(ModelError::NonHyperbolic {
                    u: pt[0],
                    re: nu.re,
                    im: nu.im,
                });
            }
        }
    }
    Ok(pts)
}

/// gamma at which the outer equilibria are exchanged by the reflection about
/// the inflection point of f.
pub fn symmetric_gamma(a: f64) -> f64 {
    let ubar = (1.0 + a) / 3.0;
    ubar / reaction(ubar, a)
}

/// Reflection `(u, v, w) -> (2 ubar - u, -v, 2 wbar - w)`; a symmetry of the
/// travelling-wave field when gamma equals [`symmetric_gamma`].
pub fn reflect(y: &[f64; 3], a: f64) -> [f64; 3] {
    let ubar = (1.0 + a) / 3.0;
    let wbar = reaction(ubar, a);
    [2.0 * ubar - y[0], -y[1], 2.0 * wbar - y[2]]
}

/// Real bases of the stable and unstable subspaces of a hyperbolic
/// equilibrium. Complex pairs contribute their real and imaginary parts.
#[derive(Debug, Clone)]
pub struct Splitting {
    pub eigen: Eigen3,
    pub stable: Vec<[f64; 3]>,
    pub unstable: Vec<[f64; 3]>,
    /// Left vectors annihilating the unstable subspace (one per stable direction).
    pub stable_left: Vec<[f64; 3]>,
    /// Left vectors annihilating the stable subspace.
    pub unstable_left: Vec<[f64; 3]>,
}

pub fn hyperbolic_splitting(pt: &[f64; 3], p: &ModelParams) -> Result<Splitting, ModelError> {
    let eigen = eig3::eigen(&tw_jacobian(pt, p));
    if eigen.values.iter().any(|z| !z.re.is_finite()) {
        return Err(ModelError::EigenFailure { u: pt[0] });
    }
    let mut stable = Vec::new();
    let mut unstable = Vec::new();
    let mut stable_left = Vec::new();
    let mut unstable_left = Vec::new();
    let mut k = 0;
    while k < 3 {
        let nu = eigen.values[k];
        if nu.re.abs() <= REAL_TOL * (1.0 + nu.norm()) {
            return Err(ModelError::NonHyperbolic {
                u: pt[0],
                re: nu.re,
                im: nu.im,
            });
        }
        let (r, l) = (&eigen.right[k], &eigen.left[k]);
        let (rs, ls): (Vec<[f64; 3]>, Vec<[f64; 3]>) = if eig3::is_real(nu) {
            (vec![re3(r)], vec![re3(l)])
        } else {
            // conjugate pair occupies k, k+1
            let out = (vec![re3(r), im3(r)], vec![re3(l), im3(l)]);
            k += 1;
            out
        };
        if nu.re < 0.0 {
            stable.extend(rs);
            stable_left.extend(ls);
        } else {
            unstable.extend(rs);
            unstable_left.extend(ls);
        }
        k += 1;
    }
    Ok(Splitting {
        eigen,
        stable,
        unstable,
        stable_left,
        unstable_left,
    })
}

fn unit_paired(l: [f64; 3], r: &[f64; 3]) -> [f64; 3] {
    let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    let s = if l[0] * r[0] + l[1] * r[1] + l[2] * r[2] < 0.0 { -1.0 } else { 1.0 };
    [s * l[0] / n, s * l[1] / n, s * l[2] / n]
}

fn re3(z: &[Complex64; 3]) -> [f64; 3] {
    [z[0].re, z[1].re, z[2].re]
}

fn im3(z: &[Complex64; 3]) -> [f64; 3] {
    [z[0].im, z[1].im, z[2].im]
}

/// Hyperbolic equilibrium with its leading (weakest) stable and unstable
/// eigen-directions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Equilibrium {
    pub point: [f64; 3],
    /// Eigenvalues sorted by real part.
    pub jacobian_eigs: [Complex64; 3],
    pub alpha_s: f64,
    pub alpha_u: f64,
    pub leading_stable_vec: [f64; 3],
    pub leading_unstable_vec: [f64; 3],
    /// Unit left eigenvectors for the leading stable and unstable
    /// eigenvalues, signed so that `<left, right> > 0`.
    pub adjoint_leading_vecs: [[f64; 3]; 2],
    /// Distance from the leading stable eigenvalue to the rest of the stable
    /// spectrum (infinite if it is alone).
    pub stable_gap: f64,
    pub unstable_gap: f64,
}

/// Leading spectral data; fails if a leading eigenvalue is complex or not
/// simple.
pub fn spectral_split(pt: &[f64; 3], p: &ModelParams) -> Result<Equilibrium, ModelError> {
    let eigen = eig3::eigen(&tw_jacobian(pt, p));
    if eigen.values.iter().any(|z| !z.re.is_finite()) {
        return Err(ModelError::EigenFailure { u: pt[0] });
    }
    let neutral = |nu: Complex64| nu.re.abs() <= REAL_TOL * (1.0 + nu.norm());
    for nu in eigen.values {
        // at epsilon = 0 the slow direction is neutral and is left out
        if neutral(nu) && !(p.epsilon == 0.0 && nu.norm() <= REAL_TOL) {
            return Err(ModelError::NonHyperbolic {
                u: pt[0],
                re: nu.re,
                im: nu.im,
            });
        }
    }
    let stable: Vec<usize> = (0..3)
        .filter(|&k| !neutral(eigen.values[k]) && eigen.values[k].re < 0.0)
        .collect();
    let unstable: Vec<usize> = (0..3)
        .filter(|&k| !neutral(eigen.values[k]) && eigen.values[k].re > 0.0)
        .collect();
    let lead = |idx: &[usize], side: &'static str| -> Result<(usize, f64), ModelError> {
        if idx.is_empty() {
            return Err(ModelError::WrongSplitting { side, u: pt[0], found: 0 });
        }
        // smallest |Re| in the set
        let &k = idx
            .iter()
            .min_by(|&&i, &&j| {
                eigen.values[i].re.abs().partial_cmp(&eigen.values[j].re.abs()).unwrap()
            })
            .unwrap();
        let nu = eigen.values[k];
        if !eig3::is_real(nu) {
            return Err(ModelError::LeadingComplex {
                side,
                u: pt[0],
                re: nu.re,
                im: nu.im,
            });
        }
        let gap = idx
            .iter()
            .filter(|&&j| j != k)
            .map(|&j| (eigen.values[j].re.abs() - nu.re.abs()).abs())
            .fold(f64::INFINITY, f64::min);
        if gap <= 1e-8 * (1.0 + nu.norm()) {
            return Err(ModelError::LeadingNotSimple { side, u: pt[0], gap });
        }
        Ok((k, gap))
    };
    let (ks, gs) = lead(&stable, "stable")?;
    let (ku, gu) = lead(&unstable, "unstable")?;
    let vs = re3(&eigen.right[ks]);
    let vu = re3(&eigen.right[ku]);
    let ls = unit_paired(re3(&eigen.left[ks]), &vs);
    let lu = unit_paired(re3(&eigen.left[ku]), &vu);
    Ok(Equilibrium {
        point: *pt,
        jacobian_eigs: eigen.values,
        alpha_s: -eigen.values[ks].re,
        alpha_u: eigen.values[ku].re,
        leading_stable_vec: vs,
        leading_unstable_vec: vu,
        adjoint_leading_vecs: [ls, lu],
        stable_gap: gs,
        unstable_gap: gu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reaction_values() {
        assert_eq!(reaction(0.0, 0.25), 0.0);
        assert_eq!(reaction(1.0, 0.25), 0.0);
        assert_eq!(reaction(0.25, 0.25), 0.0);
        assert!((reaction(0.5, 0.25) - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn symmetric_gamma_quarter() {
        assert!((symmetric_gamma(0.25) - 72.0 / 7.0).abs() < 1e-12);
        let pts = equilibrium_points(0.25, 72.0 / 7.0).unwrap();
        let us: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        assert!((us[0]).abs() < 1e-14);
        assert!((us[1] - 5.0 / 12.0).abs() < 1e-12);
        assert!((us[2] - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_equilibrium_for_small_gamma() {
        let p = ModelParams::new(0.25, 1.0, 0.01, 0.5).unwrap();
        let pts = find_equilibria(&p).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn singular_limit_jacobian_at_origin() {
        let p = ModelParams::new(0.25, 72.0 / 7.0, 0.0, 0.5).unwrap();
        let e = eig3::eigen(&tw_jacobian(&[0.0; 3], &p));
        let mut re: Vec<f64> = e.values.iter().map(|z| z.re).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((re[0] + 0.30902).abs() < 1e-5);
        assert!(re[1].abs() < 1e-12);
        assert!((re[2] - 0.80902).abs() < 1e-5);
        let s = 1.25f64.sqrt() / 2.0;
        assert!((re[2] - (0.25 + s)).abs() < 1e-13);
        assert!(matches!(find_equilibria(&p), Err(ModelError::NonHyperbolic { .. })));
    }

    #[test]
    fn singular_limit_split_at_origin() {
        let p = ModelParams::new(0.25, 1.0, 0.0, 0.5).unwrap();
        let e = spectral_split(&[0.0; 3], &p).unwrap();
        assert!((e.alpha_u - 0.80902).abs() < 1e-5);
        assert!((e.alpha_s - 0.30902).abs() < 1e-5);
    }

    #[test]
    fn reaction_at_upper_equilibrium() {
        assert!((reaction(5.0 / 6.0, 0.25) - 35.0 / 432.0).abs() < 1e-15);
    }

    #[test]
    fn inflection_value_positive() {
        for k in 1..500 {
            let a = 0.5 * k as f64 / 500.0;
            let ubar = (1.0 + a) / 3.0;
            assert!(reaction(ubar, a) > 0.0);
            let g = symmetric_gamma(a);
            let pts = equilibrium_points(a, g).unwrap();
            assert_eq!(pts.len(), 3);
            assert!((pts[1][0] - ubar).abs() < 1e-12);
            assert!((pts[2][0] - 2.0 * ubar).abs() < 1e-12);
        }
    }

    #[test]
    fn equilibria_are_fixed_points() {
        for (a, g) in [(0.25, 72.0 / 7.0), (0.1, 20.0), (0.4, 30.0), (0.25, 1.0)] {
            let p = ModelParams::new(a, g, 0.003, 0.3).unwrap();
            for pt in find_equilibria(&p).unwrap() {
                let f = tw_vector_field(&pt, &p);
                assert!(f.iter().all(|v| v.abs() <= 1e-12));
            }
        }
    }

    #[test]
    fn leading_data_symmetric_loop_point() {
        let a = 0.25;
        let p = ModelParams::new(a, symmetric_gamma(a), 0.003, 0.2957).unwrap();
        let pts = find_equilibria(&p).unwrap();
        let e1 = spectral_split(&pts[0], &p).unwrap();
        let e2 = spectral_split(&pts[2], &p).unwrap();
        // reflection maps e1 to e2 and preserves the spectrum
        assert!((e1.alpha_s - e2.alpha_s).abs() < 1e-12);
        assert!((e1.alpha_u - e2.alpha_u).abs() < 1e-12);
        let j = tw_jacobian(&pts[0], &p);
        let nu = -e1.alpha_s;
        let v = e1.leading_stable_vec;
        for i in 0..3 {
            let jv: f64 = (0..3).map(|k| j[i][k] * v[k]).sum();
            assert!((jv - nu * v[i]).abs() < 1e-10);
        }
        let l = e1.adjoint_leading_vecs[0];
        assert!(l.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() > 0.0);
        // left vector annihilates the other right eigenvectors
        let u = e1.leading_unstable_vec;
        assert!(l.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn complex_leading_pair_reported() {
        let a = 0.25;
        let p = ModelParams::new(a, symmetric_gamma(a), 0.01, 0.3536).unwrap();
        let r = spectral_split(&[0.0; 3], &p);
        assert!(matches!(r, Err(ModelError::LeadingComplex { .. })), "{r:?}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = ModelParams::new(0.25, 72.0 / 7.0, 0.01, 0.4).unwrap();
        let mut s = 12345u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        let h = 1e-5;
        for _ in 0..100 {
            let y = [rnd(), rnd(), rnd()];
            let j = tw_jacobian(&y, &p);
            for k in 0..3 {
                let mut yp = y;
                let mut ym = y;
                yp[k] += h;
                ym[k] -= h;
                let (fp, fm) = (tw_vector_field(&yp, &p), tw_vector_field(&ym, &p));
                for i in 0..3 {
                    assert!(((fp[i] - fm[i]) / (2.0 * h) - j[i][k]).abs() <= 1e-7);
                }
            }
        }
    }

    #[test]
    fn coupling_matrix_reproduces_eigenproblem() {
        // lambda U = U'' - c U' + f'(u) U - W ; lambda W = -c W' + eps U - eps gamma W
        let p = ModelParams::new(0.25, 72.0 / 7.0, 0.003, 0.3).unwrap();
        let b = coupling_matrix(p.c);
        let mut s = 99u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..20 {
            let (lam, uu, uux, ww, ubase) = (rnd(), rnd(), rnd(), rnd(), rnd());
            let j = tw_jacobian(&[ubase, 0.0, 0.0], &p);
            let z = [uu, uux, ww];
            let d: Vec<f64> = (0..3)
                .map(|i| (0..3).map(|k| (j[i][k] + lam * b[i][k]) * z[k]).sum())
                .collect();
            let fp = reaction_deriv(ubase, p.a);
            let uxx = lam * uu + p.c * uux - fp * uu + ww;
            let wx = (p.epsilon * uu - p.epsilon * p.gamma * ww - lam * ww) / p.c;
            assert!((d[0] - uux).abs() < 1e-12);
            assert!((d[1] - uxx).abs() < 1e-12);
            assert!((d[2] - wx).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(ModelParams::new(0.6, 1.0, 0.01, 0.5).is_err());
        assert!(ModelParams::new(0.25, -1.0, 0.01, 0.5).is_err());
        assert!(ModelParams::new(0.25, 1.0, 0.01, 0.0).is_err());
    }

    #[test]
    fn degenerate_double_root() {
        // (1 + a)^2 = 4 (a + 1/gamma)
        let a = 0.25;
        let gamma = 1.0 / ((1.0 + a) * (1.0 + a) / 4.0 - a);
        assert!(matches!(
            equilibrium_points(a, gamma),
            Err(ModelError::DegenerateEquilibrium { .. })
        ));
    }

    #[test]
    fn reflection_is_symmetry() {
        let a = 0.25;
        let p = ModelParams::new(a, symmetric_gamma(a), 0.003, 0.3).unwrap();
        for y in [[0.1, 0.2, 0.01], [0.7, -0.3, 0.05], [0.4, 0.0, 0.0]] {
            let f = tw_vector_field(&y, &p);
            let fr = tw_vector_field(&reflect(&y, a), &p);
            // R is linear-affine with linear part diag(-1,-1,-1)
            for i in 0..3 {
                assert!((fr[i] + f[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn param_derivatives_match_fd() {
        let p = ModelParams::new(0.25, 8.0, 0.004, 0.31).unwrap();
        let y = [0.3, -0.1, 0.02];
        let d = tw_param_derivs(&y, &p);
        let h = 1e-6;
        let fg = |g: f64| tw_vector_field(&y, &p.with_gamma_c(g, p.c));
        let fc = |c: f64| tw_vector_field(&y, &p.with_gamma_c(p.gamma, c));
        for i in 0..3 {
            let dg = (fg(p.gamma + h)[i] - fg(p.gamma - h)[i]) / (2.0 * h);
            let dc = (fc(p.c + h)[i] - fc(p.c - h)[i]) / (2.0 * h);
            assert!((dg - d[0][i]).abs() < 1e-8);
            assert!((dc - d[1][i]).abs() < 1e-8);
        }
    }
}
