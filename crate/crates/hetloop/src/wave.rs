//! Periodic wave as an exact steady state of the Fourier-discretised PDE in
//! the co-moving frame.

use faer::linalg::solvers::Solve;
use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{reaction, reaction_deriv, ModelParams};
use crate::orbits::{anchor_u, OrbitKind, OrbitProfile};
use crate::spectral::{self, Fourier};

type C = Complex64;

#[derive(Debug, Error)]
pub enum WaveError {
    #[error("profile of kind {0:?} is not periodic")]
    NotPeriodic(OrbitKind),
    #[error("spectral Newton did not converge (residual {0:e})")]
    NoConvergence(f64),
    #[error("wave unresolved: Fourier tail {tail:e} above {limit:e}")]
    Unresolved { tail: f64, limit: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralWave {
    pub period: f64,
    /// `c` is the polished speed; `gamma` is held fixed.
    pub params: ModelParams,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub residual: f64,
}

impl SpectralWave {
    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn dx(&self) -> f64 {
        self.period / self.n() as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.n()).map(|j| j as f64 * self.dx()).collect()
    }

    /// Spectral derivatives `(u', w')`.
    pub fn derivative(&self) -> (Vec<f64>, Vec<f64>) {
        let f = Fourier::new(self.n());
        (
            spectral::derivative(&f, &self.u, self.period, 1),
            spectral::derivative(&f, &self.w, self.period, 1),
        )
    }

    /// Largest Fourier coefficient magnitude among the outer 10% of modes,
    /// relative to the largest non-mean coefficient.
    pub fn tail(&self) -> f64 {
        let n = self.n();
        let f = Fourier::new(n);
        let kmax = ((n - 1) / 2) as i64;
        let edge = (kmax as f64 * 0.9) as i64;
        let mut top = 0.0f64;
        let mut tail = 0.0f64;
        for v in [&self.u, &self.w] {
            let hat = f.forward(v);
            for (j, z) in hat.iter().enumerate() {
                let k = spectral::mode_index(j, n).abs();
                if k == 0 {
                    continue;
                }
                top = top.max(z.norm());
                if k >= edge {
                    tail = tail.max(z.norm());
                }
            }
        }
        tail / top
    }

    /// Fourier coefficients of `u` and `w` (length n, FFT order).
    pub fn coefficients(&self) -> (Vec<C>, Vec<C>) {
        let f = Fourier::new(self.n());
        (f.forward(&self.u), f.forward(&self.w))
    }

    /// Steady-state residual of the discrete PDE.
    pub fn pde_residual(&self) -> f64 {
        let (ru, rw) = residuals(&self.u, &self.w, &self.params, self.period);
        ru.iter().chain(&rw).fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Wave resampled to `m` points per period.
    pub fn resampled(&self, m: usize) -> (Vec<f64>, Vec<f64>) {
        (spectral::resample(&self.u, m), spectral::resample(&self.w, m))
    }
}

fn residuals(u: &[f64], w: &[f64], p: &ModelParams, t: f64) -> (Vec<f64>, Vec<f64>) {
    let f = Fourier::new(u.len());
    let ux = spectral::derivative(&f, u, t, 1);
    let uxx = spectral::derivative(&f, u, t, 2);
    let wx = spectral::derivative(&f, w, t, 1);
    let ru = (0..u.len())
        .map(|j| uxx[j] - p.c * ux[j] + reaction(u[j], p.a) - w[j])
        .collect();
    let rw = (0..u.len())
        .map(|j| -p.c * wx[j] + p.epsilon * (u[j] - p.gamma * w[j]))
        .collect();
    (ru, rw)
}

/// Dense Fourier differentiation matrices of order 1 and 2 (odd n).
fn diff_matrices(n: usize, t: f64) -> (Mat<f64>, Mat<f64>) {
    let f = Fourier::new(n);
    let mut d1 = Mat::<f64>::zeros(n, n);
    let mut d2 = Mat::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    for k in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[k] = 1.0;
        let c1 = spectral::derivative(&f, &e, t, 1);
        let c2 = spectral::derivative(&f, &e, t, 2);
        for j in 0..n {
            d1[(j, k)] = c1[j];
            d2[(j, k)] = c2[j];
        }
    }
    (d1, d2)
}

/// Newton on the Fourier collocation equations with unknowns `(u, w, c)` and
/// the phase condition `u(0) = ubar`; `n` is rounded up to an odd 7-smooth size.
pub fn polish_wave(orbit: &OrbitProfile, n: usize, tail_limit: f64) -> Result<SpectralWave, WaveError> {
    if orbit.kind != OrbitKind::Periodic {
        return Err(WaveError::NotPeriodic(orbit.kind));
    }
    let n = spectral::smooth_odd_at_least(n);
    let t = orbit.interval().1 - orbit.interval().0;
    let h = orbit.hermite();
    let x0 = orbit.interval().0;
    let mut u = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for j in 0..n {
        let v = h.eval(x0 + t * j as f64 / n as f64);
        u.push(v[0]);
        w.push(v[2]);
    }
    let mut p = orbit.params;
    let (d1, d2) = diff_matrices(n, t);
    let ubar = anchor_u(p.a);
    let mut res = f64::INFINITY;
    for _ in 0..20 {
        let (ru, rw) = residuals(&u, &w, &p, t);
        let rphase = u[0] - ubar;
        res = ru.iter().chain(&rw).fold(rphase.abs(), |m, v| m.max(v.abs()));
        if res < 1e-13 {
            break;
        }
        let dim = 2 * n + 1;
        let mut jm = Mat::<f64>::zeros(dim, dim);
        let f = Fourier::new(n);
        let ux = spectral::derivative(&f, &u, t, 1);
        let wx = spectral::derivative(&f, &w, t, 1);
        for i in 0..n {
            for k in 0..n {
                jm[(i, k)] = d2[(i, k)] - p.c * d1[(i, k)];
                jm[(n + i, n + k)] = -p.c * d1[(i, k)];
            }
            jm[(i, i)] += reaction_deriv(u[i], p.a);
            jm[(i, n + i)] = -1.0;
            jm[(n + i, i)] = p.epsilon;
            jm[(n + i, n + i)] -= p.epsilon * p.gamma;
            jm[(i, 2 * n)] = -ux[i];
            jm[(n + i, 2 * n)] = -wx[i];
        }
        jm[(2 * n, 0)] = 1.0;
        let mut rhs = Mat::<f64>::zeros(dim, 1);
        for i in 0..n {
            rhs[(i, 0)] = -ru[i];
            rhs[(n + i, 0)] = -rw[i];
        }
        rhs[(2 * n, 0)] = -rphase;
        let dz = jm.partial_piv_lu().solve(&rhs);
        for i in 0..n {
            u[i] += dz[(i, 0)];
            w[i] += dz[(n + i, 0)];
        }
        p.c += dz[(2 * n, 0)];
    }
    if !(res < 1e-11) {
        return Err(WaveError::NoConvergence(res));
    }
    let wave = SpectralWave { period: t, params: p, u, w, residual: res };
    let tail = wave.tail();
    if tail > tail_limit {
        return Err(WaveError::Unresolved { tail, limit: tail_limit });
    }
    Ok(wave)
}
