//! Banded LU with partial pivoting (row storage with room for fill-in).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BandError {
    #[error("zero pivot at row {0}")]
    Singular(usize),
    #[error("entry ({i}, {j}) outside band (kl = {kl}, ku = {ku})")]
    OutOfBand { i: usize, j: usize, kl: usize, ku: usize },
}

#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    w: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let w = 2 * kl + ku + 1;
        Self { n, kl, ku, w, data: vec![0.0; n * w] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.w + (j + self.kl - i)
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && j + self.kl >= i && j <= i + self.ku
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) -> Result<(), BandError> {
        if !self.in_band(i, j) {
            return Err(BandError::OutOfBand { i, j, kl: self.kl, ku: self.ku });
        }
        let k = self.idx(i, j);
        self.data[k] += v;
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.idx(i, j)]
        } else {
            0.0
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku + 1).min(self.n);
            y[i] = (lo..hi).map(|j| self.data[self.idx(i, j)] * x[j]).sum();
        }
        y
    }

    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku + 1).min(self.n);
            for j in lo..hi {
                y[j] += self.data[self.idx(i, j)] * x[i];
            }
        }
        y
    }

    pub fn lu(mut self) -> Result<BandLu, BandError> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let reach = ku + kl;
        let mut piv = vec![0usize; n];
        let mut min_pivot = f64::INFINITY;
        let mut max_pivot = 0.0f64;
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.idx(k, k)].abs();
            for i in k + 1..=last {
                let v = self.data[self.idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            piv[k] = p;
            if best == 0.0 {
                return Err(BandError::Singular(k));
            }
            min_pivot = min_pivot.min(best);
            max_pivot = max_pivot.max(best);
            let jmax = (k + reach).min(n - 1);
            if p != k {
                for j in k..=jmax {
                    let (a, b) = (self.idx(k, j), self.idx(p, j));
                    self.data.swap(a, b);
                }
            }
            let d = self.data[self.idx(k, k)];
            for i in k + 1..=last {
                let ik = self.idx(i, k);
                let l = self.data[ik] / d;
                self.data[ik] = l;
                if l != 0.0 {
                    for j in k + 1..=jmax {
                        let kj = self.data[self.idx(k, j)];
                        let ij = self.idx(i, j);
                        self.data[ij] -= l * kj;
                    }
                }
            }
        }
        Ok(BandLu { m: self, piv, min_pivot, max_pivot })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
    piv: Vec<usize>,
    pub min_pivot: f64,
    pub max_pivot: f64,
}

impl BandLu {
    pub fn n(&self) -> usize {
        self.m.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = &self.m;
        let (n, kl) = (m.n, m.kl);
        let reach = m.ku + m.kl;
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.piv[k]);
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    x[i] -= m.data[m.idx(i, k)] * xk;
                }
            }
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..=(i + reach).min(n - 1) {
                s -= m.data[m.idx(i, j)] * x[j];
            }
            x[i] = s / m.data[m.idx(i, i)];
        }
        x
    }

    /// Solves `A^T x = b`.
    pub fn solve_t(&self, b: &[f64]) -> Vec<f64> {
        let m = &self.m;
        let (n, kl) = (m.n, m.kl);
        let reach = m.ku + m.kl;
        let mut x = b.to_vec();
        // U^T z = b
        for i in 0..n {
            let v = x[i] / m.data[m.idx(i, i)];
            x[i] = v;
            if v != 0.0 {
                for j in i + 1..=(i + reach).min(n - 1) {
                    x[j] -= m.data[m.idx(i, j)] * v;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for i in k + 1..=(k + kl).min(n - 1) {
                s -= m.data[m.idx(i, k)] * x[i];
            }
            x[k] = s;
            x.swap(k, self.piv[k]);
        }
        x
    }
}

/// Two smallest singular values of a square banded matrix, with the right
/// singular vector of the smallest, by inverse iteration on `A^T A`.
#[derive(Debug, Clone)]
pub struct SmallSingular {
    pub sigma: [f64; 2],
    pub right: Vec<f64>,
}

pub fn smallest_singular(a: BandMatrix, iters: usize) -> Result<SmallSingular, BandError> {
    let n = a.n();
    let lu = a.lu()?;
    let normalize = |v: &mut Vec<f64>| -> f64 {
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= s);
        s
    };
    let start = |phase: f64| -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * phase).sin() + 0.1).collect()
    };
    let mut v1 = start(0.618);
    normalize(&mut v1);
    let mut g1 = 0.0;
    for _ in 0..iters {
        let mut z = lu.solve(&lu.solve_t(&v1));
        g1 = normalize(&mut z);
        v1 = z;
    }
    let mut v2 = start(1.414);
    let project = |v: &mut Vec<f64>, u: &[f64]| {
        let d: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
    };
    project(&mut v2, &v1);
    normalize(&mut v2);
    let mut g2 = 0.0;
    for _ in 0..iters {
        let mut z = lu.solve(&lu.solve_t(&v2));
        project(&mut z, &v1);
        g2 = normalize(&mut z);
        v2 = z;
    }
    Ok(SmallSingular { sigma: [1.0 / g1.sqrt(), 1.0 / g2.sqrt()], right: v1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_band(n: usize, kl: usize, ku: usize, seed: u64) -> BandMatrix {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let mut m = BandMatrix::zeros(n, kl, ku);
        for i in 0..n {
            for j in i.saturating_sub(kl)..(i + ku + 1).min(n) {
                m.add(i, j, next()).unwrap();
            }
        }
        m
    }

    #[test]
    fn pivoting_needed() {
        // zero on the diagonal
        let mut m = BandMatrix::zeros(3, 1, 1);
        m.add(0, 1, 1.0).unwrap();
        m.add(1, 0, 1.0).unwrap();
        m.add(1, 2, 2.0).unwrap();
        m.add(2, 1, 3.0).unwrap();
        m.add(2, 2, 1.0).unwrap();
        let b = [1.0, 2.0, 3.0];
        let x = m.clone().lu().unwrap().solve(&b);
        let r = m.matvec(&x);
        for i in 0..3 {
            assert!((r[i] - b[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn singular_detected() {
        let m = BandMatrix::zeros(4, 1, 1);
        assert!(matches!(m.lu(), Err(BandError::Singular(0))));
    }

    #[test]
    fn singular_values_of_diagonal() {
        let mut m = BandMatrix::zeros(6, 1, 1);
        for (i, d) in [3.0, 1e-9, 2.0, 0.5, 4.0, 1.0].iter().enumerate() {
            m.add(i, i, *d).unwrap();
        }
        let s = smallest_singular(m, 30).unwrap();
        assert!((s.sigma[0] - 1e-9).abs() < 1e-15);
        assert!((s.sigma[1] - 0.5).abs() < 1e-6);
        assert!((s.right[1].abs() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn solve_and_transpose_solve(n in 1usize..40, kl in 0usize..5, ku in 0usize..5, seed in any::<u64>()) {
            let m = random_band(n, kl, ku, seed);
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let lu = m.clone().lu();
            prop_assume!(lu.is_ok());
            let lu = lu.unwrap();
            prop_assume!(lu.min_pivot > 1e-6 * lu.max_pivot);
            let x = lu.solve(&b);
            let y = lu.solve_t(&b);
            let rx = m.matvec(&x);
            let ry = m.matvec_t(&y);
            let xn = x.iter().chain(y.iter()).fold(1.0f64, |a, v| a.max(v.abs()));
            for i in 0..n {
                prop_assert!((rx[i] - b[i]).abs() < 1e-9 * xn);
                prop_assert!((ry[i] - b[i]).abs() < 1e-9 * xn);
            }
        }
    }
}
