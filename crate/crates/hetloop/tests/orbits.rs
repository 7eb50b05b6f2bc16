use std::sync::OnceLock;

use hetloop::model::{self, reaction, reflect, spectral_split, symmetric_gamma};
use hetloop::orbits::*;

const A: f64 = 0.25;
const EPS: f64 = 0.003;

struct Fixture {
    lp: LoopLocus,
    family: PeriodicFamily,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let opts = OrbitOptions::default();
        let lp = locate_loop(A, EPS, &opts).unwrap();
        let family = continue_periodic(&lp, &[80.0, 112.0, 160.0], &opts, 0.05, 0.1).unwrap();
        Fixture { lp, family }
    })
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn loop_locus_at_symmetric_gamma() {
    let lp = &fixture().lp;
    let g = symmetric_gamma(A);
    assert!((g - 72.0 / 7.0).abs() < 1e-13);
    assert!(((lp.gamma0 - g) / g).abs() <= 0.02);
    assert!(lp.splitting_residuals.iter().all(|r| *r <= 1e-8), "{:?}", lp.splitting_residuals);
    for h in [&lp.h1, &lp.h2] {
        assert!(h.collocation_defect() <= 1e-8);
        assert!(closing_defect(h) <= 1e-8);
        assert!(h.mesh.windows(2).all(|w| w[1] > w[0]));
    }
    assert_eq!(lp.h1.kind, OrbitKind::Front);
    assert_eq!(lp.h2.kind, OrbitKind::Back);
}

#[test]
fn back_is_reflected_front() {
    // F(Ry) = -F(y) with R linear part -I, so R h1(x) solves the same ODE
    let lp = &fixture().lp;
    let hb = lp.h2.hermite();
    let worst = lp
        .h1
        .mesh
        .iter()
        .zip(&lp.h1.values)
        .map(|(x, y)| dist(&reflect(y, A), &lp.h2.eval(&hb, *x)))
        .fold(0.0, f64::max);
    assert!(worst <= 1e-8, "{worst:e}");
}

#[test]
fn endpoints_decay_at_spectral_rates() {
    let lp = &fixture().lp;
    let h = &lp.h1;
    let p = h.params;
    let (e1, e2) = outer_equilibria(A, p.gamma).unwrap();
    let (s1, s2) = (spectral_split(&e1, &p).unwrap(), spectral_split(&e2, &p).unwrap());
    let herm = h.hermite();
    let (lo, hi) = h.interval();
    let gap = |x: f64, e: &[f64; 3]| dist(&h.eval(&herm, x), e).ln();
    // unstable approach to e1 at the left end
    let (x0, x1) = (lo + 10.0, lo + 30.0);
    let left = (gap(x1, &e1) - gap(x0, &e1)) / (x1 - x0);
    assert!(((left - s1.alpha_u) / s1.alpha_u).abs() <= 0.1, "{left} vs {}", s1.alpha_u);
    // weak stable approach to e2 at the right end
    let (x0, x1) = (hi - 40.0, hi - 10.0);
    let right = -(gap(x1, &e2) - gap(x0, &e2)) / (x1 - x0);
    assert!(((right - s2.alpha_s) / s2.alpha_s).abs() <= 0.1, "{right} vs {}", s2.alpha_s);
    let centre = dist(&h.eval(&herm, 0.0), &e1);
    assert!(dist(&h.values[0], &e1) <= 5.0 * (s1.alpha_u * lo).exp() * centre);
}

#[test]
fn variational_kernel_is_one_dimensional() {
    let lp = &fixture().lp;
    for h in [&lp.h1, &lp.h2] {
        let cert = variational_certificate(h).unwrap();
        assert!(cert.ratio >= 100.0, "{cert:?}");
        assert!(cert.angle_to_tangent <= 1e-3, "{cert:?}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let h = &fixture().lp.h1;
    let text = h.to_checkpoint();
    let back = OrbitProfile::from_checkpoint(&text, "memory").unwrap();
    assert_eq!(&back, h);
    assert_eq!(back.to_checkpoint(), text);
    let path = std::env::temp_dir().join(format!("hetloop-orbit-{}.txt", std::process::id()));
    h.save(&path).unwrap();
    let loaded = OrbitProfile::load(&path).unwrap();
    std::fs::remove_file(&path).ok();
    assert_eq!(&loaded, h);
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let text = fixture().lp.h1.to_checkpoint();
    assert!(OrbitProfile::from_checkpoint("", "x").is_err());
    assert!(OrbitProfile::from_checkpoint(&text.replacen("# orbit-profile v1", "# nope", 1), "x").is_err());
    let truncated: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
    let err = OrbitProfile::from_checkpoint(&truncated, "cut.txt").unwrap_err().to_string();
    assert!(err.contains("cut.txt") && err.contains("rows"), "{err}");
    let garbled = text.replacen("kind front", "kind sideways", 1);
    assert!(OrbitProfile::from_checkpoint(&garbled, "x").is_err());
}

fn profile_gap(a: &OrbitProfile, b: &OrbitProfile) -> f64 {
    let hb = b.hermite();
    a.mesh
        .iter()
        .zip(&a.values)
        .map(|(x, y)| dist(y, &b.eval(&hb, *x)))
        .fold(0.0, f64::max)
}

#[test]
fn mesh_refinement_converges_at_fourth_order() {
    // Newton is driven below the default tolerance so that the differences
    // measure the discretisation rather than the stopping criterion
    let base = OrbitOptions::default();
    let loops: Vec<LoopLocus> = [1600, 3200, 6400, 12800]
        .iter()
        .map(|&nodes| locate_loop(A, EPS, &OrbitOptions { nodes, tol: 1e-13, ..base }).unwrap())
        .collect();
    let gaps: Vec<f64> = loops.windows(2).map(|w| profile_gap(&w[0].h1, &w[1].h1)).collect();
    for w in gaps.windows(2) {
        assert!(w[0] / w[1] >= 10.0, "{gaps:?}");
    }
    assert!(*gaps.last().unwrap() <= 10.0 * base.tol, "{gaps:?}");
}

#[test]
fn speed_tends_to_fast_front_speed() {
    let c0 = fast_front_speed(A);
    let opts = OrbitOptions::default();
    let gaps: Vec<f64> = [0.005, 0.003, 0.002]
        .iter()
        .map(|&e| (locate_loop(A, e, &opts).unwrap().c_star - c0).abs())
        .collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
}

/// Speed of the front of u'' - c u' + f(u) = 0 from 0 to 1 by shooting along
/// the unstable direction of the origin and bisecting on overshoot.
fn shooting_speed(a: f64) -> f64 {
    let overshoots = |c: f64| -> bool {
        let mu = 0.5 * (c + (c * c + 4.0 * a).sqrt());
        let (mut u, mut v) = (1e-8, 1e-8 * mu);
        let rhs = |u: f64, v: f64| (v, c * v - reaction(u, a));
        let h = 1e-3;
        for _ in 0..400_000 {
            let k1 = rhs(u, v);
            let k2 = rhs(u + 0.5 * h * k1.0, v + 0.5 * h * k1.1);
            let k3 = rhs(u + 0.5 * h * k2.0, v + 0.5 * h * k2.1);
            let k4 = rhs(u + h * k3.0, v + h * k3.1);
            u += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            v += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            if u > 1.0 {
                return true;
            }
            if v < 0.0 {
                return false;
            }
        }
        false
    };
    // the energy v^2/2 + F(u) grows like c v^2, so large c overshoots u = 1
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if overshoots(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn fast_front_speed_matches_shooting() {
    for a in [0.1, 0.25, 0.4] {
        let s = shooting_speed(a);
        assert!((s - fast_front_speed(a)).abs() <= 1e-5, "a = {a}: {s} vs {}", fast_front_speed(a));
    }
}

fn peak(h: &OrbitProfile) -> (usize, f64) {
    h.values.iter().enumerate().fold((0, f64::MIN), |m, (i, y)| if y[0] > m.1 { (i, y[0]) } else { m })
}

#[test]
fn front_has_fast_jump_shape() {
    // the fast jump climbs monotonically past 2 ubar towards u = 1; the slow
    // passage then relaxes to e2, and the overshoot grows as epsilon shrinks
    let ubar = (1.0 + A) / 3.0;
    let lp = locate_loop(A, 0.002, &OrbitOptions::default()).unwrap();
    let u: Vec<f64> = lp.h1.values.iter().map(|y| y[0]).collect();
    let (imax, umax) = peak(&lp.h1);
    assert!(u[..=imax].windows(2).all(|w| w[1] >= w[0] - 1e-12));
    assert!(umax > 2.0 * ubar + 0.05 && umax < 1.0, "{umax}");
    assert!((u.last().unwrap() - 2.0 * ubar).abs() < 1e-3);
    assert!(umax > peak(&fixture().lp.h1).1);
}

#[test]
fn continuation_in_epsilon_matches_direct_solve() {
    let lp = &fixture().lp;
    let opts = OrbitOptions::default();
    let cont = continue_loop(lp, 0.0035, &opts).unwrap();
    let direct = locate_loop(A, 0.0035, &opts).unwrap();
    assert!((cont.c_star - direct.c_star).abs() <= 1e-9);
    assert!((cont.gamma0 - direct.gamma0).abs() <= 1e-9);
}

#[test]
fn parameter_guards() {
    let opts = OrbitOptions::default();
    assert!(matches!(locate_loop(A, 0.06, &opts), Err(OrbitError::EpsilonCeiling { .. })));
    let lp = &fixture().lp;
    assert!(matches!(continue_periodic(lp, &[20.0], &opts, 0.05, 0.1), Err(OrbitError::PeriodTooShort { .. })));
    let short = OrbitOptions { half_length: 5.0, ..opts };
    assert!(locate_loop(A, EPS, &short).is_err());
}

#[test]
fn periodic_family_contracts() {
    let f = &fixture().family;
    assert!(f.failures.is_empty(), "{:?}", f.failures);
    assert_eq!(f.entries.len(), 3);
    for e in &f.entries {
        assert!((e.period - 2.0 * (e.l1 + e.l2)).abs() <= 1e-12);
        assert!(e.closure <= 1e-9, "T{} closure {:e}", e.period, e.closure);
        assert!(e.orbit.collocation_defect() <= 1e-8);
        assert_eq!(e.orbit.kind, OrbitKind::Periodic);
    }
    assert!(f.entries.windows(2).all(|w| w[1].period > w[0].period));
    let ls: Vec<f64> = f.entries.iter().map(|e| e.l1.min(e.l2)).collect();
    let sup: Vec<f64> = f.entries.iter().map(|e| e.sup_distance.ln()).collect();
    let mu: Vec<f64> = f.entries.iter().map(|e| e.mu[0].hypot(e.mu[1]).ln()).collect();
    assert!(mu.windows(2).all(|w| w[1] < w[0]));
    assert!(sup.windows(2).all(|w| w[1] < w[0]));
    assert!(slope(&ls, &sup) <= -0.75 * f.alpha, "sup slope {}", slope(&ls, &sup));
    assert!(slope(&ls, &mu) <= -f.alpha, "mu slope {}", slope(&ls, &mu));
    assert!(f.entries.last().unwrap().tube_fraction > 0.8);
    let lp = &fixture().lp;
    assert!((f.alpha - loop_min_rate(lp).unwrap()).abs() < 1e-15);
}

#[test]
fn epsilon_zero_is_accepted_by_the_model() {
    let p = model::ModelParams::new(A, symmetric_gamma(A), 0.0, 0.5).unwrap();
    let eq = spectral_split(&[0.0; 3], &p).unwrap();
    assert!((eq.alpha_u - 0.809016994374947).abs() < 1e-9);
    assert!((eq.alpha_s - 0.309016994374947).abs() < 1e-9);
}
