use std::f64::consts::PI;
use std::sync::OnceLock;

use hetloop::bloch::*;
use hetloop::model::{reaction_deriv, symmetric_gamma, ModelParams};
use hetloop::orbits::{continue_periodic, locate_loop, OrbitOptions};
use hetloop::wave::{polish_wave, SpectralWave};
use num_complex::Complex64 as C;

struct Fixture {
    wave: SpectralWave,
    sweep: SpectralSweep,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let opts = OrbitOptions::default();
        let lp = locate_loop(0.25, 0.003, &opts).unwrap();
        let fam = continue_periodic(&lp, &[80.0], &opts, 0.05, 0.1).unwrap();
        let wave = polish_wave(&fam.entries[0].orbit, 161, 1e-10).unwrap();
        let sweep = sweep(&wave, &SweepOptions::default()).unwrap();
        Fixture { wave, sweep }
    })
}

fn constant_wave(u0: f64, period: f64, n: usize) -> SpectralWave {
    let a = 0.25;
    let params = ModelParams::new(a, symmetric_gamma(a), 0.003, 0.3).unwrap();
    SpectralWave { period, params, u: vec![u0; n], w: vec![0.0; n], residual: 0.0 }
}

#[test]
fn constant_state_matches_fourier_symbol() {
    let wave = constant_wave(0.1, 20.0, 41);
    let p = wave.params;
    let k = 20;
    for xi in [0.0, 0.07, -0.13] {
        let op = assemble_bloch(xi, &wave, k).unwrap();
        assert_eq!(op.size(), 2 * (2 * k + 1));
        let ev = eigenvalues(&op).unwrap();
        let mut symbol = Vec::new();
        for m in -(k as i64)..=k as i64 {
            let q = 2.0 * PI * m as f64 / wave.period + xi;
            let a11 = C::new(-q * q + reaction_deriv(0.1, p.a), -p.c * q);
            let a22 = C::new(-p.epsilon * p.gamma, -p.c * q);
            let tr = a11 + a22;
            let det = a11 * a22 + p.epsilon;
            let disc = (tr * tr - 4.0 * det).sqrt();
            symbol.push((tr + disc) / 2.0);
            symbol.push((tr - disc) / 2.0);
        }
        let d = set_distance(&ev, &symbol, f64::NEG_INFINITY);
        let scale = symbol.iter().map(|z| z.norm()).fold(1.0, f64::max);
        assert!(d <= 1e-10 * scale, "xi = {xi}: {d:e}");
    }
}

#[test]
fn operator_apply_matches_matrix_rows() {
    let w = &fixture().wave;
    let k = fixture().sweep.k;
    let op = assemble_bloch(0.01, w, k).unwrap();
    let v: Vec<C> = (0..op.size()).map(|i| C::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
    let av = op.apply(&v);
    let i = op.size() / 3;
    let row: C = (0..op.size()).map(|j| op.matrix[(i, j)] * v[j]).sum();
    assert!((av[i] - row).norm() <= 1e-14 * row.norm().max(1.0));
    let k = k as i64;
    assert_eq!(op.mode(0), -k);
    assert_eq!(op.mode(2 * k as usize + 1), -k);
    assert_eq!(op.mode(k as usize), 0);
}

/// Largest distance from an eigenvalue of `a` inside `|z| <= r` to the set `b`.
fn near_distance(a: &[C], b: &[C], r: f64) -> f64 {
    a.iter()
        .filter(|z| z.norm() <= r)
        .map(|z| b.iter().map(|w| (z - w).norm()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

#[test]
fn spectrum_is_floquet_periodic_and_conjugate_symmetric() {
    let f = fixture();
    let k = f.sweep.k;
    let t = f.wave.period;
    // shifting xi moves the mode window; the undamped w-modes at its edge are
    // truncation artefacts, so compare the spectrum near the origin only
    let r = 0.5;
    for xi in [0.013, -0.021] {
        let a = eigenvalues(&assemble_bloch(xi, &f.wave, k).unwrap()).unwrap();
        let b = eigenvalues(&assemble_bloch(xi + 2.0 * PI / t, &f.wave, k).unwrap()).unwrap();
        let c: Vec<C> = eigenvalues(&assemble_bloch(-xi, &f.wave, k).unwrap()).unwrap().iter().map(|z| z.conj()).collect();
        let d = near_distance(&a, &b, r).max(near_distance(&b, &a, r));
        assert!(d <= 1e-8, "{d:e}");
        assert!(set_distance(&a, &c, -1.0) <= 1e-8);
    }
    assert!(f.sweep.conjugate_defect <= 1e-8);
}

#[test]
fn parseval_holds_for_a_gaussian() {
    let (n_per, n_cell, t) = (64, 32, 10.0);
    let len = n_per as f64 * t;
    let dx = t / n_cell as f64;
    let g: Vec<C> = (0..n_per * n_cell)
        .map(|j| {
            let x = j as f64 * dx - len / 2.0;
            C::new((-x * x / 200.0).exp(), 0.0) * C::from_polar(1.0, 0.4 * x)
        })
        .collect();
    let r = bloch_parseval_check(&g, n_per, t).unwrap();
    assert!(r.relative_error <= 1e-10, "{r:?}");
    assert!(r.tail_mass <= 1e-8);

    let zero = vec![C::new(0.0, 0.0); n_per * n_cell];
    let r = bloch_parseval_check(&zero, n_per, t).unwrap();
    assert_eq!(r.lhs, 0.0);
    assert_eq!(r.relative_error, 0.0);

    let wide: Vec<C> = (0..n_per * n_cell)
        .map(|j| {
            let x = j as f64 * dx - len / 2.0;
            C::new((-x * x / 1e5).exp(), 0.0)
        })
        .collect();
    assert!(matches!(bloch_parseval_check(&wide, n_per, t), Err(BlochError::WindowTooSmall(_))));
}

#[test]
fn bloch_transform_of_pure_mode_is_concentrated() {
    let (n_per, n_cell, t) = (16, 8, 4.0);
    let dx = t / n_cell as f64;
    let j0 = 11usize;
    let xi0 = 2.0 * PI * (j0 as f64 - (n_per / 2) as f64) / (n_per as f64 * t);
    let g: Vec<C> = (0..n_per * n_cell).map(|j| C::from_polar(1.0, xi0 * j as f64 * dx)).collect();
    let (xis, out) = bloch_transform(&g, n_per, t);
    assert!((xis[j0] - xi0).abs() <= 1e-15);
    for (j, row) in out.iter().enumerate() {
        for z in row {
            if j == j0 {
                // e^{i xi0 x} has periodic part 1
                assert!((z - C::new(t * n_per as f64, 0.0)).norm() <= 1e-10);
            } else {
                assert!(z.norm() <= 1e-10);
            }
        }
    }
}

#[test]
fn reference_wave_is_certified() {
    let f = fixture();
    let c = &f.sweep.certification;
    assert!(c.cond1 && c.cond2 && c.cond3, "{c:?}");
    assert!(c.translation_residual <= 1e-6, "{:e}", c.translation_residual);
    assert!(c.zero_gap >= 1e3 * c.zero_eigenvalue.norm());
    assert!(c.bulk_gap >= c.zero_gap);
    assert!(c.theta > 0.0 && c.delta1 > 0.0);
    assert!((c.xi1 - PI / (2.0 * f.wave.period)).abs() <= 1e-15);
    assert!(f.sweep.radius > 0.0);
    let fit = f.sweep.fit.expect("tangency fit");
    assert!(fit.d > 0.0);
    // critical eigenvalues lie in the open left half-plane off xi = 0
    for (j, x) in f.sweep.xi.iter().enumerate() {
        if *x != 0.0 {
            assert!(f.sweep.critical[j].re < 0.0);
        }
    }
}

#[test]
fn critical_eigenfunction_tends_to_translation_mode() {
    let f = fixture();
    let s = &f.sweep;
    let mid = (s.xi.len() - 1) / 2;
    assert!(s.eigenfunction_gap[mid] <= 1e-6, "{:e}", s.eigenfunction_gap[mid]);
    // gap grows at most linearly near xi = 0
    assert!(s.eigenfunction_slope.is_finite() && s.eigenfunction_slope >= 0.0);
    let near = s.eigenfunction_gap[mid + 1];
    let far = s.eigenfunction_gap[s.xi.len() - 1];
    assert!(near <= far, "{near:e} {far:e}");
}

#[test]
fn single_xi_solver_agrees_with_sweep() {
    let f = fixture();
    let s = &f.sweep;
    for j in [0, 5, s.xi.len() / 2 + 3] {
        let z = critical_eigenvalue(&f.wave, s.k, s.xi[j], s.radius).unwrap();
        assert!((z - s.critical[j]).norm() <= 1e-10 * s.max_critical(), "{z} {}", s.critical[j]);
    }
    let (x, z) = s.critical_at(1e-9);
    assert_eq!(x, 0.0);
    assert_eq!(z, s.critical[(s.xi.len() - 1) / 2]);
    assert!(matches!(critical_eigenvalue(&f.wave, s.k, 0.01, 1e-30), Err(BlochError::NoCritical(_))));
}

#[test]
fn mode_refinement_leaves_critical_eigenvalue_unchanged() {
    let f = fixture();
    let s = &f.sweep;
    let xi = PI / (2.0 * f.wave.period);
    let coarse = critical_eigenvalue(&f.wave, s.k, xi, s.radius).unwrap();
    let fine = critical_eigenvalue(&f.wave, 2 * s.k, xi, s.radius).unwrap();
    assert!((coarse - fine).norm() <= 1e-6 * coarse.norm(), "{coarse} {fine}");
}

#[test]
fn input_guards() {
    let f = fixture();
    for n in [31, 34] {
        let o = SweepOptions { xi_count: n, ..Default::default() };
        assert!(matches!(sweep(&f.wave, &o), Err(BlochError::XiCount(_))));
    }
    assert!(matches!(assemble_bloch(0.0, &f.wave, 5), Err(BlochError::Unresolved { .. })));
    assert!(matches!(
        exponential_scaling_study(&[20.0, 28.0], &[&f.sweep, &f.sweep]),
        Err(BlochError::TooFewSweeps(2))
    ));
    assert!(tail_at(&f.wave, 10 * f.wave.n()) == 0.0);
}

#[test]
fn csv_has_one_row_per_xi() {
    let s = &fixture().sweep;
    let text = s.csv();
    assert_eq!(text.lines().count(), 1 + s.xi.len());
    assert!(text.starts_with("xi,re_lambda_c,im_lambda_c,spectral_gap"));
}

#[test]
fn linear_fit_recovers_a_line() {
    let x = [1.0, 2.0, 4.0, 7.0];
    let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
    let (m, b) = linear_fit(&x, &y);
    assert!((m + 0.5).abs() <= 1e-14 && (b - 3.0).abs() <= 1e-14);
}
