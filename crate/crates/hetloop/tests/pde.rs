use std::sync::OnceLock;

use hetloop::orbits::{continue_periodic, locate_loop, OrbitOptions};
use hetloop::pde::*;
use hetloop::spectral::{self, Fourier};
use hetloop::wave::{polish_wave, SpectralWave};
use num_complex::Complex64 as C;

struct Fixture {
    coarse: SpectralWave,
    fine: SpectralWave,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let opts = OrbitOptions::default();
        let lp = locate_loop(0.25, 0.003, &opts).unwrap();
        let fam = continue_periodic(&lp, &[80.0], &opts, 0.05, 0.1).unwrap();
        let orbit = &fam.entries[0].orbit;
        let coarse = polish_wave(orbit, 161, 1e-10).unwrap();
        let fine = polish_wave(orbit, 2 * coarse.n(), 1e-10).unwrap();
        Fixture { coarse, fine }
    })
}

/// `v(x + s)` for samples of a periodic function on `[0, length)`.
fn shift(v: &[f64], s: f64, length: f64) -> Vec<f64> {
    let f = Fourier::new(v.len());
    let k = spectral::wavenumbers(v.len(), length);
    let hat: Vec<C> = f.forward(v).iter().zip(&k).map(|(z, kk)| z * C::from_polar(1.0, kk * s)).collect();
    f.inverse_real(&hat)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn quick_opts(t_end: f64) -> RunOptions {
    RunOptions { dt: 0.1, t_end, sample_dt: 1.0, phase_samples: 0, eps0: 0.5, min_cells: 2, snapshots: vec![t_end] }
}

fn bump(amplitude: f64) -> PerturbationSpec {
    PerturbationSpec { amplitude, width: 6.0, ..Default::default() }
}

#[test]
fn wave_is_a_steady_state() {
    let w = &fixture().coarse;
    assert!(w.pde_residual() <= 1e-10, "{:e}", w.pde_residual());
    let window = Window::new(w, 4);
    let stepper = Stepper::new(&window, 0.2).unwrap();
    let s0 = window.steady_state();
    let s1 = step(&s0, &window, &stepper, 1000).unwrap();
    assert!(max_diff(&s1.u, &s0.u) <= 1e-8 && max_diff(&s1.w, &s0.w) <= 1e-8);
    assert!((s1.t - 200.0).abs() <= 1e-9);
}

#[test]
fn step_size_is_guarded() {
    let window = Window::new(&fixture().coarse, 4);
    assert!(matches!(Stepper::new(&window, 10.0), Err(PdeError::StepTooLarge { .. })));
    assert!(matches!(Stepper::new(&window, 0.0), Err(PdeError::StepTooLarge { .. })));
    let p = fixture().coarse.params;
    let b = stability_bound(&p, (0.0, 0.9));
    assert!(b > 0.0 && b < 1.0 / 0.25);
    // a wider range never loosens the bound
    assert!(stability_bound(&p, (-0.5, 1.2)) <= b);
}

#[test]
fn time_stepping_is_second_order() {
    let w = &fixture().coarse;
    let window = Window::new(w, 4);
    let spec = bump(0.05);
    let (du, dw) = spec.sample(&window);
    let mut s0 = window.steady_state();
    s0.u.iter_mut().zip(&du).for_each(|(a, b)| *a += b);
    s0.w.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
    let t_end = 4.0;
    let runs: Vec<Vec<f64>> = [0.2, 0.1, 0.05, 0.025]
        .iter()
        .map(|&dt| {
            let st = Stepper::new(&window, dt).unwrap();
            step(&s0, &window, &st, (t_end / dt).round() as usize).unwrap().u
        })
        .collect();
    let e: Vec<f64> = runs.windows(2).map(|p| max_diff(&p[0], &p[1])).collect();
    for r in e.windows(2) {
        let order = (r[0] / r[1]).log2();
        assert!((order - 2.0).abs() <= 0.3, "{e:?}");
    }
}

#[test]
fn small_perturbations_evolve_linearly() {
    let window = Window::new(&fixture().coarse, 4);
    let a = run_experiment(&window, &bump(1e-4), &quick_opts(30.0), None).unwrap();
    let b = run_experiment(&window, &bump(5e-5), &quick_opts(30.0), None).unwrap();
    for j in [0, 10, 30] {
        let r = a.vt_l2[j] / b.vt_l2[j];
        assert!((r - 2.0).abs() <= 0.1, "t = {}: ratio {r}", a.t[j]);
    }
    let z = run_experiment(&window, &bump(0.0), &quick_opts(30.0), None).unwrap();
    assert!(z.vt_l2.iter().all(|v| *v == 0.0));
    assert!(z.blowup.is_none());
    let snap = &a.snapshots[0];
    assert!((snap.t - 30.0).abs() <= 1e-9 && snap.u.len() == window.nx());
}

#[test]
fn spatial_resolution_is_converged() {
    let f = fixture();
    let opts = quick_opts(20.0);
    let spec = bump(1e-3);
    let ca = run_experiment(&Window::new(&f.coarse, 4), &spec, &opts, None).unwrap();
    let fi = run_experiment(&Window::new(&f.fine, 4), &spec, &opts, None).unwrap();
    for j in 0..ca.t.len() {
        let rel = (ca.vt_l2[j] - fi.vt_l2[j]).abs() / fi.vt_l2[j];
        assert!(rel <= 1e-6, "t = {}: {rel:e}", ca.t[j]);
    }
}

#[test]
fn experiment_guards() {
    let window = Window::new(&fixture().coarse, 4);
    let mut opts = quick_opts(1.0);
    opts.min_cells = 40;
    assert!(matches!(run_experiment(&window, &bump(1e-4), &opts, None), Err(PdeError::WindowTooSmall { .. })));
    let opts = RunOptions { eps0: 1e-6, ..quick_opts(1.0) };
    assert!(matches!(run_experiment(&window, &bump(1e-3), &opts, None), Err(PdeError::TooLarge { .. })));
    let bad = FieldState { u: vec![0.0; 3], w: vec![0.0; 3], ..window.steady_state() };
    let st = Stepper::new(&window, 0.1).unwrap();
    assert!(matches!(step(&bad, &window, &st, 1), Err(PdeError::Shape(3))));
}

#[test]
fn phase_of_translated_wave_is_the_shift() {
    let window = Window::new(&fixture().coarse, 4);
    let ex = PhaseExtractor::new(&window);
    let base = window.steady_state();
    let rest = ex.extract(&base);
    assert_eq!(rest.flagged, 0);
    assert!(rest.phi.iter().all(|v| v.abs() <= 1e-10));
    for s in [0.3, -1.1] {
        let st = FieldState {
            u: shift(&base.u, s, window.length),
            w: shift(&base.w, s, window.length),
            ..base.clone()
        };
        let pf = ex.extract(&st);
        assert_eq!(pf.flagged, 0);
        assert!(pf.phi.iter().all(|v| (v - s).abs() <= 1e-8), "s = {s}");
    }
}

#[test]
fn phase_of_infinitesimal_translation_is_first_order() {
    let window = Window::new(&fixture().coarse, 4);
    let ex = PhaseExtractor::new(&window);
    let base = window.steady_state();
    let f = Fourier::new(base.u.len());
    let ux = spectral::derivative(&f, &base.u, window.length, 1);
    let wx = spectral::derivative(&f, &base.w, window.length, 1);
    let err = |d: f64| {
        let st = FieldState {
            u: base.u.iter().zip(&ux).map(|(a, b)| a + d * b).collect(),
            w: base.w.iter().zip(&wx).map(|(a, b)| a + d * b).collect(),
            ..base.clone()
        };
        ex.extract(&st).phi.iter().map(|v| (v - d).abs()).fold(0.0, f64::max)
    };
    let (e1, e2) = (err(1e-3), err(5e-4));
    assert!(e1 <= 1e-4, "{e1:e}");
    // the mismatch is at least quadratic in the amplitude
    assert!(e1 / e2 >= 3.5, "{e1:e} {e2:e}");
}

#[test]
fn modulated_perturbation_removes_the_shift() {
    let window = Window::new(&fixture().coarse, 4);
    let base = window.steady_state();
    let s = 0.4;
    let st = FieldState { u: shift(&base.u, s, window.length), w: shift(&base.w, s, window.length), ..base.clone() };
    let phi = vec![s; st.u.len()];
    let (vu, vw) = modulated_perturbation(&st, &(base.u.clone(), base.w.clone()), &phi);
    assert!(vu.iter().chain(&vw).all(|v| v.abs() <= 1e-7));
    // periodic Lagrange interpolation reproduces cubics exactly
    let n = 64;
    let dx = 0.1;
    let cubic = |x: f64| 0.5 - x + 0.25 * x * x - 0.01 * x * x * x;
    let vals: Vec<f64> = (0..n).map(|j| cubic(j as f64 * dx)).collect();
    let x = 3.14159;
    assert!((interpolate(&vals, dx, x, 4) - cubic(x)).abs() <= 1e-12);
}

#[test]
fn decay_fit_recovers_synthetic_exponent() {
    let t: Vec<f64> = (0..400).map(|j| j as f64 * 2.5).collect();
    let y: Vec<f64> = t.iter().map(|tt| 0.7 * (1.0 + tt).powf(-0.75)).collect();
    let fit = fit_decay(&t, &y, 10.0, 900.0).unwrap();
    assert!((fit.exponent + 0.75).abs() <= 1e-12, "{fit:?}");
    assert!((fit.prefactor - 0.7).abs() <= 1e-10);
    assert!(fit.ci <= 1e-10);
    assert!(matches!(fit_decay(&t, &y, 10.0, 12.0), Err(PdeError::TooFewSamples(_))));
}

#[test]
fn damping_ledger_for_zero_and_amplified_runs() {
    let window = Window::new(&fixture().coarse, 4);
    let zero = run_experiment(&window, &bump(0.0), &quick_opts(20.0), None).unwrap();
    let z = damping_check(&zero, None);
    assert_eq!(z.c_uniform, 0.0);
    assert!(z.certified && z.first_violation.is_none());

    let run = run_experiment(&window, &bump(1e-3), &quick_opts(40.0), None).unwrap();
    let base = damping_check(&run, None);
    assert!(base.c_uniform.is_finite());
    assert!(base.c_required.windows(2).all(|w| w[1] >= w[0]));
    let mut loud = run.clone();
    loud.vt_h4.iter_mut().skip(1).for_each(|v| *v *= 100.0);
    let l = damping_check(&loud, Some(base.c_uniform.max(1.0)));
    assert!(l.first_violation.is_some());
    assert!(l.c_uniform > base.c_uniform);
}

#[test]
fn phase_diagnostics_satisfy_mean_value_bound() {
    let window = Window::new(&fixture().coarse, 4);
    let opts = RunOptions { phase_samples: 6, ..quick_opts(60.0) };
    let run = run_experiment(&window, &bump(1e-3), &opts, None).unwrap();
    assert!(!run.phase.is_empty());
    assert!(run.phase.iter().all(|p| p.flagged_cells == 0));
    let rep = modulated_decay_report(&run).unwrap();
    assert!(rep.mean_value_excess <= 1e-9, "{:e}", rep.mean_value_excess);
    assert!(rep.vtilde_l2.samples >= 3);
    assert_eq!(run.phase_csv().lines().count(), 1 + run.phase.len());
    assert_eq!(run.csv().lines().count(), 1 + run.t.len());
}

#[test]
fn wrap_time_solves_the_spreading_equation() {
    let window = Window::new(&fixture().coarse, 4);
    let spec = bump(1e-3);
    let free = 0.5 * window.length - 3.0 * spec.width;
    let (b, d) = (0.02, 0.5);
    let t = wrap_time(&window, &spec, b, d);
    assert!((b * t + (4.0 * d * t).sqrt() - free).abs() <= 1e-9 * free);
    assert!(wrap_time(&window, &spec, 0.0, 0.0).is_infinite());
    let wide = PerturbationSpec { width: window.length, ..spec };
    assert_eq!(wrap_time(&window, &wide, b, d), 0.0);
}

#[test]
fn snapshot_text_has_header_and_rows() {
    let window = Window::new(&fixture().coarse, 2);
    let text = window.steady_state().to_text();
    assert!(text.starts_with("# field-snapshot v1"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), window.nx());
}
