//! Fourier helpers on uniform periodic grids.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

type C = Complex64;

/// Forward/backward FFT pair of a fixed length; the forward transform is
/// normalised so that `hat[k]` are Fourier-series coefficients.
#[derive(Clone)]
pub struct Fourier {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fourier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fourier({})", self.n)
    }
}

impl Fourier {
    pub fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Self { n, fwd: p.plan_fft_forward(n), inv: p.plan_fft_inverse(n) }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward(&self, x: &[f64]) -> Vec<C> {
        let mut buf: Vec<C> = x.iter().map(|&v| C::new(v, 0.0)).collect();
        self.forward_in_place(&mut buf);
        buf
    }

    pub fn forward_in_place(&self, buf: &mut [C]) {
        self.fwd.process(buf);
        let s = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|z| *z *= s);
    }

    pub fn inverse_in_place(&self, buf: &mut [C]) {
        self.inv.process(buf);
    }

    /// Real part of the inverse transform.
    pub fn inverse_real(&self, hat: &[C]) -> Vec<f64> {
        let mut buf = hat.to_vec();
        self.inv.process(&mut buf);
        buf.iter().map(|z| z.re).collect()
    }
}

/// Signed integer index of FFT slot `j`.
pub fn mode_index(j: usize, n: usize) -> i64 {
    if j <= (n - 1) / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Angular wavenumbers `2 pi k / L` in FFT order. For even `n` the Nyquist
/// slot gets `+pi n / L`.
pub fn wavenumbers(n: usize, length: f64) -> Vec<f64> {
    let base = 2.0 * std::f64::consts::PI / length;
    (0..n)
        .map(|j| {
            if n % 2 == 0 && j == n / 2 {
                base * (n / 2) as f64
            } else {
                base * mode_index(j, n) as f64
            }
        })
        .collect()
}

/// Symbol of d/dx (Nyquist mode of even grids removed).
pub fn first_derivative_symbol(n: usize, length: f64) -> Vec<C> {
    let k = wavenumbers(n, length);
    (0..n)
        .map(|j| if n % 2 == 0 && j == n / 2 { C::new(0.0, 0.0) } else { C::new(0.0, k[j]) })
        .collect()
}

/// Spectral derivative of order `order` of periodic samples over `length`.
pub fn derivative(f: &Fourier, x: &[f64], length: f64, order: u32) -> Vec<f64> {
    let n = x.len();
    let mut hat = f.forward(x);
    let k = wavenumbers(n, length);
    for j in 0..n {
        let nyq = n % 2 == 0 && j == n / 2;
        let m = if nyq && order % 2 == 1 { C::new(0.0, 0.0) } else { C::new(0.0, k[j]).powu(order) };
        hat[j] *= m;
    }
    f.inverse_real(&hat)
}

/// Band-limited interpolation of periodic samples to `m` points.
pub fn resample(x: &[f64], m: usize) -> Vec<f64> {
    let n = x.len();
    if n == m {
        return x.to_vec();
    }
    let hat = Fourier::new(n).forward(x);
    let mut out = vec![C::new(0.0, 0.0); m];
    let kmax = ((n.min(m) - 1) / 2) as i64;
    for j in 0..n {
        let k = mode_index(j, n);
        if k.abs() <= kmax {
            let slot = if k >= 0 { k as usize } else { (m as i64 + k) as usize };
            out[slot] = hat[j];
        }
    }
    Fourier::new(m).inverse_real(&out)
}

/// Odd integer `>= n` whose prime factors are all at most 7.
pub fn smooth_odd_at_least(n: usize) -> usize {
    let mut m = n.max(3) | 1;
    loop {
        let mut r = m;
        for p in [3, 5, 7] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_sine() {
        let n = 64;
        let l = 7.0;
        let xs: Vec<f64> = (0..n).map(|j| l * j as f64 / n as f64).collect();
        let k = 2.0 * std::f64::consts::PI * 3.0 / l;
        let f: Vec<f64> = xs.iter().map(|x| (k * x).sin()).collect();
        let four = Fourier::new(n);
        let d = derivative(&four, &f, l, 1);
        let d2 = derivative(&four, &f, l, 2);
        for j in 0..n {
            assert!((d[j] - k * (k * xs[j]).cos()).abs() < 1e-11);
            assert!((d2[j] + k * k * f[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn resample_exact_for_band_limited() {
        let f = |x: f64| (2.0 * x).cos() + 0.3 * x.sin();
        let n = 15;
        let m = 33;
        let tau = 2.0 * std::f64::consts::PI;
        let a: Vec<f64> = (0..n).map(|j| f(tau * j as f64 / n as f64)).collect();
        let b = resample(&a, m);
        for (j, v) in b.iter().enumerate() {
            assert!((v - f(tau * j as f64 / m as f64)).abs() < 1e-13);
        }
    }

    #[test]
    fn smooth_sizes() {
        assert_eq!(smooth_odd_at_least(160), 175);
        assert_eq!(smooth_odd_at_least(225), 225);
        assert_eq!(smooth_odd_at_least(226), 243);
        assert_eq!(smooth_odd_at_least(2), 3);
    }
}
