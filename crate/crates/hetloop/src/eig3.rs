//! Eigen-decomposition of real 3x3 matrices through the characteristic
//! cubic, with a general dense solver as fallback.

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::model::REAL_TOL;

type C = Complex64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Eigen3 {
    /// Sorted by (Re, Im).
    pub values: [C; 3],
    /// Unit right eigenvectors; first significant component real positive.
    pub right: [[C; 3]; 3],
    /// Left eigenvectors scaled so that `sum_i left[k][i] * right[k][i] = 1`.
    pub left: [[C; 3]; 3],
    /// True if the cubic path failed its residual check.
    pub used_fallback: bool,
}

pub fn is_real(z: C) -> bool {
    z.im.abs() <= REAL_TOL * (1.0 + z.norm())
}

fn char_poly(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let minors = m[0][0] * m[1][1] - m[0][1] * m[1][0] + m[0][0] * m[2][2]
        - m[0][2] * m[2][0]
        + m[1][1] * m[2][2]
        - m[1][2] * m[2][1];
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    // nu^3 + c2 nu^2 + c1 nu + c0
    [-det, minors, -tr]
}

fn peval(c: &[f64; 3], z: C) -> (C, C) {
    let p = ((z + c[2]) * z + c[1]) * z + c[0];
    let dp = (z * 3.0 + 2.0 * c[2]) * z + c[1];
    (p, dp)
}

fn real_root(c: &[f64; 3]) -> f64 {
    let f = |x: f64| ((x + c[2]) * x + c[1]) * x + c[0];
    let b = 1.0 + c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (mut lo, mut hi) = (-b, b);
    let mut x = 0.0;
    for _ in 0..200 {
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            lo = x
        } else {
            hi = x
        }
        let dfx = (3.0 * x + 2.0 * c[2]) * x + c[1];
        let xn = x - fx / dfx;
        x = if dfx != 0.0 && xn > lo && xn < hi {
            xn
        } else {
            0.5 * (lo + hi)
        };
        if (hi - lo) <= 4.0 * f64::EPSILON * (1.0 + x.abs()) {
            break;
        }
    }
    x
}

fn polish(c: &[f64; 3], mut z: C) -> C {
    for _ in 0..6 {
        let (p, dp) = peval(c, z);
        if dp.norm() == 0.0 {
            break;
        }
        let dz = p / dp;
        z -= dz;
        if dz.norm() <= 1e-16 * (1.0 + z.norm()) {
            break;
        }
    }
    z
}

fn cubic_roots(c: &[f64; 3]) -> [C; 3] {
    let r = real_root(c);
    // deflate: nu^2 + b nu + q
    let b = c[2] + r;
    let q = c[1] + r * b;
    let disc = b * b - 4.0 * q;
    let (z1, z2) = if disc >= 0.0 {
        let s = disc.sqrt();
        let big = -0.5 * (b + b.signum() * s);
        if big == 0.0 {
            (C::new(0.0, 0.0), C::new(0.0, 0.0))
        } else {
            (C::new(big, 0.0), C::new(q / big, 0.0))
        }
    } else {
        let s = (-disc).sqrt();
        (C::new(-0.5 * b, -0.5 * s), C::new(-0.5 * b, 0.5 * s))
    };
    let mut out = [C::new(r, 0.0), polish(c, z1), polish(c, z2)];
    for z in out.iter_mut() {
        if is_real(*z) {
            z.im = 0.0;
        }
    }
    // keep conjugate pairs exactly conjugate
    if out[1].im != 0.0 && out[2].im != 0.0 {
        let re = 0.5 * (out[1].re + out[2].re);
        let im = 0.5 * (out[2].im - out[1].im).abs();
        out[1] = C::new(re, -im);
        out[2] = C::new(re, im);
    }
    out
}

fn cross(a: &[C; 3], b: &[C; 3]) -> [C; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: &[C; 3]) -> f64 {
    (a[0].norm_sqr() + a[1].norm_sqr() + a[2].norm_sqr()).sqrt()
}

/// Null vector of a (numerically) singular 3x3 complex matrix given by rows.
fn null_vector(rows: &[[C; 3]; 3]) -> [C; 3] {
    let mut best = [C::new(0.0, 0.0); 3];
    let mut bn = -1.0;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let v = cross(&rows[i], &rows[j]);
        let n = norm3(&v);
        if n > bn {
            bn = n;
            best = v;
        }
    }
    if bn <= 1e-300 {
        return [C::new(1.0, 0.0), C::new(0.0, 0.0), C::new(0.0, 0.0)];
    }
    best
}

fn normalize_phase(v: &mut [C; 3]) {
    let n = norm3(v);
    let mut k = 0;
    for (i, z) in v.iter().enumerate() {
        if z.norm() > 1e-8 * n {
            k = i;
            break;
        }
    }
    let ph = v[k] / v[k].norm();
    for z in v.iter_mut() {
        *z = *z / ph / n;
    }
    v[k].im = 0.0;
}

fn vectors_for(m: &[[f64; 3]; 3], nu: C) -> ([C; 3], [C; 3]) {
    let mut a = [[C::new(0.0, 0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] = C::new(m[i][j], 0.0);
        }
        a[i][i] -= nu;
    }
    let at = [
        [a[0][0], a[1][0], a[2][0]],
        [a[0][1], a[1][1], a[2][1]],
        [a[0][2], a[1][2], a[2][2]],
    ];
    let mut r = null_vector(&a);
    normalize_phase(&mut r);
    let mut l = null_vector(&at);
    let d = l[0] * r[0] + l[1] * r[1] + l[2] * r[2];
    if d.norm() > 0.0 {
        for z in l.iter_mut() {
            *z /= d;
        }
    }
    if nu.im == 0.0 {
        for z in r.iter_mut().chain(l.iter_mut()) {
            z.im = 0.0;
        }
    }
    (r, l)
}

fn residual_ok(m: &[[f64; 3]; 3], nu: &[C; 3]) -> bool {
    let scale = 1.0 + m.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs()));
    let c = char_poly(m);
    nu.iter().all(|&z| {
        let (p, _) = peval(&c, z);
        p.is_finite() && p.norm() <= 1e-10 * scale * scale * scale
    })
}

fn dense_eigenvalues(m: &[[f64; 3]; 3]) -> [C; 3] {
    let a = Mat::<f64>::from_fn(3, 3, |i, j| m[i][j]);
    let Ok(ev) = a.eigenvalues() else {
        return [C::new(f64::NAN, f64::NAN); 3];
    };
    let mut out = [C::new(0.0, 0.0); 3];
    for (k, z) in ev.into_iter().enumerate().take(3) {
        out[k] = C::new(z.re, z.im);
    }
    out
}

/// Eigen-data of a 3x3 matrix. Non-finite input (or a failed fallback)
/// yields NaN values and vectors; check `values` before use.
pub fn eigen(m: &[[f64; 3]; 3]) -> Eigen3 {
    let nan = C::new(f64::NAN, f64::NAN);
    let invalid = Eigen3 { values: [nan; 3], right: [[nan; 3]; 3], left: [[nan; 3]; 3], used_fallback: true };
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return invalid;
    }
    let c = char_poly(m);
    let mut vals = cubic_roots(&c);
    let mut used_fallback = false;
    if !residual_ok(m, &vals) {
        vals = dense_eigenvalues(m);
        for z in vals.iter_mut() {
            if is_real(*z) {
                z.im = 0.0;
            }
        }
        used_fallback = true;
        if vals.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return invalid;
        }
    }
    vals.sort_by(|x, y| x.re.partial_cmp(&y.re).unwrap().then(x.im.partial_cmp(&y.im).unwrap()));
    let mut right = [[C::new(0.0, 0.0); 3]; 3];
    let mut left = right;
    for k in 0..3 {
        let (r, l) = vectors_for(m, vals[k]);
        right[k] = r;
        left[k] = l;
    }
    Eigen3 {
        values: vals,
        right,
        left,
        used_fallback,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(m: &[[f64; 3]; 3], v: &[C; 3]) -> [C; 3] {
        let mut o = [C::new(0.0, 0.0); 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i] += v[j] * m[i][j];
            }
        }
        o
    }

    #[test]
    fn diagonal_matrix() {
        let m = [[3.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 0.5]];
        let e = eigen(&m);
        let re: Vec<f64> = e.values.iter().map(|z| z.re).collect();
        assert_eq!(re, vec![-1.0, 0.5, 3.0]);
        assert!(e.values.iter().all(|z| z.im == 0.0));
    }

    #[test]
    fn rotation_block() {
        let m = [[0.0, -2.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, -1.0]];
        let e = eigen(&m);
        assert!((e.values[0].re + 1.0).abs() < 1e-14);
        assert!((e.values[1] - C::new(0.0, -2.0)).norm() < 1e-13);
        assert!((e.values[2] - C::new(0.0, 2.0)).norm() < 1e-13);
        for k in 0..3 {
            let av = apply(&m, &e.right[k]);
            for i in 0..3 {
                assert!((av[i] - e.values[k] * e.right[k][i]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn biorthogonal_left_right() {
        let m = [[0.0, 1.0, 0.0], [0.2, 0.3, 1.0], [0.01, 0.0, -0.1]];
        let e = eigen(&m);
        for j in 0..3 {
            for k in 0..3 {
                let d: C = (0..3).map(|i| e.left[j][i] * e.right[k][i]).sum();
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((d - want).norm() < 1e-10, "{j}{k} {d}");
            }
        }
    }
}
