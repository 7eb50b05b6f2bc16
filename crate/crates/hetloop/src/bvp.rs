//! Fourth-order Hermite–Simpson (Lobatto IIIA) collocation for boundary value
//! problems with separated and interior point conditions, solved by damped
//! Newton on a banded system.
//!
//! Unknown parameters and periodic couplings are handled by the caller by
//! appending constant components (`p' = 0`) to the state, which keeps the
//! Jacobian banded.

use thiserror::Error;

use crate::banded::{BandError, BandLu, BandMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BvpError {
    #[error("condition count mismatch: {left} left + {right} right + {interior} interior != dim {dim}")]
    ConditionCount {
        left: usize,
        right: usize,
        interior: usize,
        dim: usize,
    },
    #[error("interior point x = {0} is not a mesh node")]
    InteriorNotNode(f64),
    #[error("mesh must be strictly increasing with at least 2 nodes")]
    BadMesh,
    #[error("linear algebra failure: {0}")]
    Linear(#[from] BandError),
    #[error("Newton did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("line search failed at iteration {iteration} (residual {residual:e})")]
    LineSearch { iteration: usize, residual: f64 },
    #[error("non-finite residual")]
    NonFinite,
}

/// A first-order system `y' = F(x, y)` with boundary and interior conditions.
pub trait Bvp {
    fn dim(&self) -> usize;
    fn rhs(&self, x: f64, y: &[f64], f: &mut [f64]);
    /// Row-major `dim x dim` Jacobian of `rhs` with respect to `y`.
    fn jac(&self, x: f64, y: &[f64], j: &mut [f64]);
    fn n_left(&self) -> usize;
    /// Residual and Jacobian (`n_left x dim`, row-major) at the left end.
    fn left(&self, y: &[f64], r: &mut [f64], j: &mut [f64]);
    fn n_right(&self) -> usize;
    fn right(&self, y: &[f64], r: &mut [f64], j: &mut [f64]);
    /// Interior conditions as `(x, count)`; `x` must be a mesh node.
    fn interior_points(&self) -> Vec<(f64, usize)> {
        Vec::new()
    }
    fn interior(&self, _k: usize, _y: &[f64], _r: &mut [f64], _j: &mut [f64]) {}
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub step_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-11, max_iter: 40, step_tol: 1e-14 }
    }
}

#[derive(Debug, Clone)]
pub struct BvpSolution {
    pub mesh: Vec<f64>,
    /// Node values, flattened `(N + 1) x dim`.
    pub y: Vec<f64>,
    pub dim: usize,
    pub residual: f64,
    pub iterations: usize,
}

impl BvpSolution {
    pub fn node(&self, i: usize) -> &[f64] {
        &self.y[i * self.dim..(i + 1) * self.dim]
    }
}

struct Layout {
    /// Condition rows placed before interval `i` (interior at node i, or left at 0).
    node_rows: Vec<Vec<(usize, usize)>>,
    n_rows: usize,
    kl: usize,
    ku: usize,
}

fn layout<B: Bvp + ?Sized>(bvp: &B, mesh: &[f64]) -> Result<Layout, BvpError> {
    let d = bvp.dim();
    let n = mesh.len();
    if n < 2 || mesh.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(BvpError::BadMesh);
    }
    let pts = bvp.interior_points();
    let n_int: usize = pts.iter().map(|p| p.1).sum();
    if bvp.n_left() + bvp.n_right() + n_int != d {
        return Err(BvpError::ConditionCount {
            left: bvp.n_left(),
            right: bvp.n_right(),
            interior: n_int,
            dim: d,
        });
    }
    // (condition index, count) per node; index usize::MAX marks the left end
    let mut node_rows: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    if bvp.n_left() > 0 {
        node_rows[0].push((usize::MAX, bvp.n_left()));
    }
    for (k, &(x, cnt)) in pts.iter().enumerate() {
        let i = mesh
            .iter()
            .position(|&m| (m - x).abs() <= 1e-12 * (1.0 + x.abs()))
            .ok_or(BvpError::InteriorNotNode(x))?;
        if i == n - 1 {
            return Err(BvpError::InteriorNotNode(x));
        }
        node_rows[i].push((k, cnt));
    }
    let mut row = 0usize;
    let mut kl = 0usize;
    let mut ku = 0usize;
    for i in 0..n - 1 {
        for &(_, cnt) in &node_rows[i] {
            // rows row..row+cnt, cols d*i..d*i+d
            kl = kl.max((row + cnt - 1).saturating_sub(d * i));
            ku = ku.max((d * i + d - 1).saturating_sub(row));
            row += cnt;
        }
        kl = kl.max((row + d - 1).saturating_sub(d * i));
        ku = ku.max((d * i + 2 * d - 1).saturating_sub(row));
        row += d;
    }
    let last = n - 1;
    let nr = bvp.n_right();
    if nr > 0 {
        kl = kl.max((row + nr - 1).saturating_sub(d * last));
        ku = ku.max((d * last + d - 1).saturating_sub(row));
        row += nr;
    }
    Ok(Layout { node_rows, n_rows: row, kl, ku })
}

/// Collocation residual and (optionally) banded Jacobian.
fn assemble<B: Bvp + ?Sized>(
    bvp: &B,
    mesh: &[f64],
    z: &[f64],
    lay: &Layout,
    want_jac: bool,
) -> Result<(Vec<f64>, Option<BandMatrix>), BvpError> {
    let d = bvp.dim();
    let n = mesh.len();
    let mut g = vec![0.0; lay.n_rows];
    let mut jm = if want_jac {
        Some(BandMatrix::zeros(lay.n_rows, lay.kl, lay.ku))
    } else {
        None
    };
    let mut f0 = vec![0.0; d];
    let mut f1 = vec![0.0; d];
    let mut fm = vec![0.0; d];
    let mut ym = vec![0.0; d];
    let mut j0 = vec![0.0; d * d];
    let mut j1 = vec![0.0; d * d];
    let mut jmid = vec![0.0; d * d];
    let mut row = 0usize;
    let cond = |i: usize, k: usize, cnt: usize, row: usize, g: &mut Vec<f64>, jm: &mut Option<BandMatrix>, rb: &mut [f64], jb: &mut [f64]| -> Result<(), BvpError> {
        let y = &z[d * i..d * i + d];
        let (r, jj) = (&mut rb[..cnt], &mut jb[..cnt * d]);
        if k == usize::MAX {
            bvp.left(y, r, jj);
        } else if k == usize::MAX - 1 {
            bvp.right(y, r, jj);
        } else {
            bvp.interior(k, y, r, jj);
        }
        for a in 0..cnt {
            g[row + a] = r[a];
            if let Some(m) = jm.as_mut() {
                for b in 0..d {
                    let v = jj[a * d + b];
                    if v != 0.0 {
                        m.add(row + a, d * i + b, v)?;
                    }
                }
            }
        }
        Ok(())
    };
    let maxc = d.max(1);
    let mut rb = vec![0.0; maxc];
    let mut jb = vec![0.0; maxc * d];
    for i in 0..n - 1 {
        for &(k, cnt) in &lay.node_rows[i] {
            cond(i, k, cnt, row, &mut g, &mut jm, &mut rb, &mut jb)?;
            row += cnt;
        }
        let (x0, x1) = (mesh[i], mesh[i + 1]);
        let h = x1 - x0;
        let y0 = &z[d * i..d * i + d];
        let y1 = &z[d * (i + 1)..d * (i + 1) + d];
        bvp.rhs(x0, y0, &mut f0);
        bvp.rhs(x1, y1, &mut f1);
        for a in 0..d {
            ym[a] = 0.5 * (y0[a] + y1[a]) + h / 8.0 * (f0[a] - f1[a]);
        }
        let xm = x0 + 0.5 * h;
        bvp.rhs(xm, &ym, &mut fm);
        for a in 0..d {
            g[row + a] = y1[a] - y0[a] - h / 6.0 * (f0[a] + 4.0 * fm[a] + f1[a]);
        }
        if let Some(m) = jm.as_mut() {
            bvp.jac(x0, y0, &mut j0);
            bvp.jac(x1, y1, &mut j1);
            bvp.jac(xm, &ym, &mut jmid);
            // d ym / d y0 = I/2 + h/8 J0 ; d ym / d y1 = I/2 - h/8 J1
            for a in 0..d {
                for b in 0..d {
                    let mut s0 = 0.0;
                    let mut s1 = 0.0;
                    for c in 0..d {
                        let jac_ac = jmid[a * d + c];
                        if jac_ac != 0.0 {
                            let e = if c == b { 0.5 } else { 0.0 };
                            s0 += jac_ac * (e + h / 8.0 * j0[c * d + b]);
                            s1 += jac_ac * (e - h / 8.0 * j1[c * d + b]);
                        }
                    }
                    let id = if a == b { 1.0 } else { 0.0 };
                    let d0 = -id - h / 6.0 * (j0[a * d + b] + 4.0 * s0);
                    let d1 = id - h / 6.0 * (j1[a * d + b] + 4.0 * s1);
                    if d0 != 0.0 {
                        m.add(row + a, d * i + b, d0)?;
                    }
                    if d1 != 0.0 {
                        m.add(row + a, d * (i + 1) + b, d1)?;
                    }
                }
            }
        }
        row += d;
    }
    let nr = bvp.n_right();
    if nr > 0 {
        cond(n - 1, usize::MAX - 1, nr, row, &mut g, &mut jm, &mut rb, &mut jb)?;
    }
    Ok((g, jm))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Residual vector of the discretised problem.
pub fn residual<B: Bvp + ?Sized>(bvp: &B, mesh: &[f64], z: &[f64]) -> Result<Vec<f64>, BvpError> {
    let lay = layout(bvp, mesh)?;
    Ok(assemble(bvp, mesh, z, &lay, false)?.0)
}

/// Banded Jacobian of the discretised problem at `z`.
pub fn jacobian<B: Bvp + ?Sized>(bvp: &B, mesh: &[f64], z: &[f64]) -> Result<BandMatrix, BvpError> {
    let lay = layout(bvp, mesh)?;
    Ok(assemble(bvp, mesh, z, &lay, true)?.1.unwrap())
}

/// Damped Newton iteration with Armijo backtracking.
pub fn solve<B: Bvp + ?Sized>(
    bvp: &B,
    mesh: &[f64],
    guess: &[f64],
    opts: &NewtonOptions,
) -> Result<BvpSolution, BvpError> {
    let lay = layout(bvp, mesh)?;
    let d = bvp.dim();
    assert_eq!(guess.len(), d * mesh.len());
    let mut z = guess.to_vec();
    let (mut g, _) = assemble(bvp, mesh, &z, &lay, false)?;
    let mut phi: f64 = g.iter().map(|v| v * v).sum();
    if !phi.is_finite() {
        return Err(BvpError::NonFinite);
    }
    for it in 0..opts.max_iter {
        let res = inf_norm(&g);
        if res <= opts.tol {
            return Ok(BvpSolution { mesh: mesh.to_vec(), y: z, dim: d, residual: res, iterations: it });
        }
        let (_, jm) = assemble(bvp, mesh, &z, &lay, true)?;
        let lu: BandLu = jm.unwrap().lu()?;
        let step = lu.solve(&g);
        let zscale = 1.0 + inf_norm(&z);
        let snorm = inf_norm(&step);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = z.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let (gt, _) = assemble(bvp, mesh, &trial, &lay, false)?;
            let pt: f64 = gt.iter().map(|v| v * v).sum();
            if pt.is_finite() && pt <= (1.0 - 2e-4 * t) * phi {
                z = trial;
                g = gt;
                phi = pt;
                break;
            }
            t *= 0.5;
            if t < 1.0 / 4096.0 {
                if res <= 1e3 * opts.tol {
                    return Ok(BvpSolution { mesh: mesh.to_vec(), y: z, dim: d, residual: res, iterations: it });
                }
                return Err(BvpError::LineSearch { iteration: it, residual: res });
            }
        }
        if t * snorm <= opts.step_tol * zscale {
            let res = inf_norm(&g);
            if res <= 1e3 * opts.tol {
                return Ok(BvpSolution { mesh: mesh.to_vec(), y: z, dim: d, residual: res, iterations: it + 1 });
            }
            return Err(BvpError::NoConvergence { iterations: it + 1, residual: res });
        }
    }
    let res = inf_norm(&g);
    if res <= opts.tol {
        return Ok(BvpSolution { mesh: mesh.to_vec(), y: z, dim: d, residual: res, iterations: opts.max_iter });
    }
    Err(BvpError::NoConvergence { iterations: opts.max_iter, residual: res })
}

/// Piecewise cubic Hermite interpolant through node values and slopes.
#[derive(Debug, Clone)]
pub struct Hermite {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub dy: Vec<f64>,
    pub dim: usize,
}

impl Hermite {
    pub fn new(x: Vec<f64>, y: Vec<f64>, dy: Vec<f64>, dim: usize) -> Self {
        assert_eq!(y.len(), x.len() * dim);
        assert_eq!(dy.len(), x.len() * dim);
        Self { x, y, dy, dim }
    }

    pub fn locate(&self, t: f64) -> usize {
        let n = self.x.len();
        if t <= self.x[0] {
            return 0;
        }
        if t >= self.x[n - 1] {
            return n - 2;
        }
        let i = self.x.partition_point(|&v| v <= t);
        (i - 1).min(n - 2)
    }

    /// Value and derivative at `t` (clamped to the mesh range).
    pub fn eval_into(&self, t: f64, val: &mut [f64], der: &mut [f64]) {
        let d = self.dim;
        let i = self.locate(t);
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let h = x1 - x0;
        let s = ((t - x0) / h).clamp(0.0, 1.0);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let d00 = (6.0 * s2 - 6.0 * s) / h;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = (-6.0 * s2 + 6.0 * s) / h;
        let d11 = 3.0 * s2 - 2.0 * s;
        for a in 0..d {
            let (y0, y1) = (self.y[i * d + a], self.y[(i + 1) * d + a]);
            let (m0, m1) = (self.dy[i * d + a], self.dy[(i + 1) * d + a]);
            val[a] = h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1;
            der[a] = d00 * y0 + d10 * m0 + d01 * y1 + d11 * m1;
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut d = vec![0.0; self.dim];
        self.eval_into(t, &mut v, &mut d);
        v
    }
}

/// Mesh on `[a, b]` equidistributing `monitor`, with `n` intervals and every
/// point of `anchors` (inside `(a, b)`) included as a node.
pub fn equidistributed_mesh(
    a: f64,
    b: f64,
    n: usize,
    anchors: &[f64],
    monitor: &dyn Fn(f64) -> f64,
) -> Vec<f64> {
    let mut cuts = vec![a];
    let mut an: Vec<f64> = anchors.iter().copied().filter(|&x| x > a && x < b).collect();
    an.sort_by(|p, q| p.partial_cmp(q).unwrap());
    cuts.extend(an);
    cuts.push(b);
    // fine quadrature of the monitor
    let m = 20 * n.max(10);
    let xs: Vec<f64> = (0..=m).map(|k| a + (b - a) * k as f64 / m as f64).collect();
    let mut cum = vec![0.0; m + 1];
    for k in 0..m {
        cum[k + 1] = cum[k] + 0.5 * (monitor(xs[k]) + monitor(xs[k + 1])) * (xs[k + 1] - xs[k]);
    }
    let cum_at = |x: f64| -> f64 {
        let t = ((x - a) / (b - a) * m as f64).clamp(0.0, m as f64);
        let k = (t.floor() as usize).min(m - 1);
        cum[k] + (t - k as f64) * (cum[k + 1] - cum[k])
    };
    let inv = |c: f64| -> f64 {
        let k = cum.partition_point(|&v| v < c).clamp(1, m);
        let (c0, c1) = (cum[k - 1], cum[k]);
        let s = if c1 > c0 { (c - c0) / (c1 - c0) } else { 0.0 };
        xs[k - 1] + s * (xs[k] - xs[k - 1])
    };
    let total = cum[m];
    let mut mesh = vec![a];
    for w in cuts.windows(2) {
        let (ca, cb) = (cum_at(w[0]), cum_at(w[1]));
        let k = (((cb - ca) / total) * n as f64).round().max(1.0) as usize;
        for j in 1..k {
            let x = inv(ca + (cb - ca) * j as f64 / k as f64);
            if x > *mesh.last().unwrap() && x < w[1] {
                mesh.push(x);
            }
        }
        mesh.push(w[1]);
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;

    /// y'' = -y on [0, pi/2], y(0) = 0, y(pi/2) = 1: y = sin x.
    struct Harmonic;
    impl Bvp for Harmonic {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _x: f64, y: &[f64], f: &mut [f64]) {
            f[0] = y[1];
            f[1] = -y[0];
        }
        fn jac(&self, _x: f64, _y: &[f64], j: &mut [f64]) {
            j.copy_from_slice(&[0.0, 1.0, -1.0, 0.0]);
        }
        fn n_left(&self) -> usize {
            1
        }
        fn left(&self, y: &[f64], r: &mut [f64], j: &mut [f64]) {
            r[0] = y[0];
            j.copy_from_slice(&[1.0, 0.0]);
        }
        fn n_right(&self) -> usize {
            1
        }
        fn right(&self, y: &[f64], r: &mut [f64], j: &mut [f64]) {
            r[0] = y[0] - 1.0;
            j.copy_from_slice(&[1.0, 0.0]);
        }
    }

    fn err_for(n: usize) -> f64 {
        let b = std::f64::consts::FRAC_PI_2;
        let mesh: Vec<f64> = (0..=n).map(|k| b * k as f64 / n as f64).collect();
        let guess = vec![0.0; 2 * (n + 1)];
        let sol = solve(&Harmonic, &mesh, &guess, &NewtonOptions::default()).unwrap();
        (0..=n)
            .map(|i| (sol.node(i)[0] - mesh[i].sin()).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn fourth_order_convergence() {
        let e1 = err_for(8);
        let e2 = err_for(16);
        let rate = (e1 / e2).log2();
        assert!(rate > 3.8 && rate < 4.3, "rate {rate}");
    }

    /// Nonlinear: y'' = 1.5 y^2, y(0) = 4, y(1) = 1; solution 4/(1+x)^2.
    struct Bratu;
    impl Bvp for Bratu {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _x: f64, y: &[f64], f: &mut [f64]) {
            f[0] = y[1];
            f[1] = 1.5 * y[0] * y[0];
        }
        fn jac(&self, _x: f64, y: &[f64], j: &mut [f64]) {
            j.copy_from_slice(&[0.0, 1.0, 3.0 * y[0], 0.0]);
        }
        fn n_left(&self) -> usize {
            1
        }
        fn left(&self, y: &[f64], r: &mut [f64], j: &mut [f64]) {
            r[0] = y[0] - 4.0;
            j.copy_from_slice(&[1.0, 0.0]);
        }
        fn n_right(&self) -> usize {
            1
        }
        fn right(&self, y: &[f64], r: &mut [f64], j: &mut [f64]) {
            r[0] = y[0] - 1.0;
            j.copy_from_slice(&[1.0, 0.0]);
        }
    }

    #[test]
    fn nonlinear_newton() {
        let n = 64;
        let mesh: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
        let guess: Vec<f64> = mesh.iter().flat_map(|&x| [4.0 - 3.0 * x, -3.0]).collect();
        let sol = solve(&Bratu, &mesh, &guess, &NewtonOptions::default()).unwrap();
        for i in 0..=n {
            let x = mesh[i];
            assert!((sol.node(i)[0] - 4.0 / ((1.0 + x) * (1.0 + x))).abs() < 1e-7);
        }
    }

    #[test]
    fn hermite_reproduces_cubic() {
        let x: Vec<f64> = vec![0.0, 0.3, 1.0, 1.7];
        let f = |t: f64| t * t * t - 2.0 * t + 1.0;
        let df = |t: f64| 3.0 * t * t - 2.0;
        let h = Hermite::new(x.clone(), x.iter().map(|&t| f(t)).collect(), x.iter().map(|&t| df(t)).collect(), 1);
        for t in [0.1, 0.5, 1.2, 1.69] {
            let mut v = [0.0];
            let mut d = [0.0];
            h.eval_into(t, &mut v, &mut d);
            assert!((v[0] - f(t)).abs() < 1e-13);
            assert!((d[0] - df(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn mesh_contains_anchor() {
        let m = equidistributed_mesh(-10.0, 20.0, 100, &[0.0, 5.0], &|x: f64| 1.0 + (-x * x).exp() * 10.0);
        assert!(m.contains(&0.0) && m.contains(&5.0));
        assert!(m.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(m[0], -10.0);
        assert_eq!(*m.last().unwrap(), 20.0);
    }
}
