use hetloop::eig3;
use hetloop::model::*;
use num_complex::Complex64 as C;
use proptest::prelude::*;

fn params() -> impl Strategy<Value = ModelParams> {
    (0.05..0.45f64, 0.5..20.0f64, 0.0..0.05f64, 0.05..1.0f64)
        .prop_map(|(a, gamma, epsilon, c)| ModelParams::new(a, gamma, epsilon, c).unwrap())
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-2.0..2.0f64)
}

proptest! {
    #[test]
    fn jacobian_matches_central_differences(p in params(), y in point()) {
        let j = tw_jacobian(&y, &p);
        let h = 1e-5;
        for col in 0..3 {
            let (mut yp, mut ym) = (y, y);
            yp[col] += h;
            ym[col] -= h;
            let (fp, fm) = (tw_vector_field(&yp, &p), tw_vector_field(&ym, &p));
            for row in 0..3 {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                prop_assert!((fd - j[row][col]).abs() <= 1e-7, "J[{row}][{col}]: {fd} vs {}", j[row][col]);
            }
        }
    }

    #[test]
    fn parameter_derivatives_match_differences(p in params(), y in point()) {
        let d = tw_param_derivs(&y, &p);
        let h = 1e-6;
        let fd = |q: ModelParams, r: ModelParams| {
            let (a, b) = (tw_vector_field(&y, &q), tw_vector_field(&y, &r));
            [0, 1, 2].map(|i| (a[i] - b[i]) / (2.0 * h))
        };
        let dg = fd(p.with_gamma_c(p.gamma + h, p.c), p.with_gamma_c(p.gamma - h, p.c));
        let dc = fd(p.with_gamma_c(p.gamma, p.c + h), p.with_gamma_c(p.gamma, p.c - h));
        for i in 0..3 {
            prop_assert!((dg[i] - d[0][i]).abs() <= 1e-6 * (1.0 + d[0][i].abs()));
            prop_assert!((dc[i] - d[1][i]).abs() <= 1e-6 * (1.0 + d[1][i].abs()));
        }
    }

    #[test]
    fn equilibria_are_zeros(a in 0.05..0.45f64, gamma in 0.5..30.0f64) {
        if let Ok(pts) = equilibrium_points(a, gamma) {
            prop_assert!(pts.len() == 1 || pts.len() == 3);
            let p = ModelParams::new(a, gamma, 0.01, 0.3).unwrap();
            for pt in &pts {
                let f = tw_vector_field(pt, &p);
                prop_assert!(f.iter().all(|x| x.abs() <= 1e-12));
            }
        }
    }

    #[test]
    fn symmetric_gamma_gives_arithmetic_progression(a in 0.05..0.45f64) {
        let g = symmetric_gamma(a);
        let pts = equilibrium_points(a, g).unwrap();
        prop_assert_eq!(pts.len(), 3);
        let ubar = (1.0 + a) / 3.0;
        prop_assert!((pts[1][0] - ubar).abs() <= 1e-12);
        prop_assert!((pts[0][0] + pts[2][0] - 2.0 * pts[1][0]).abs() <= 1e-12);
    }

    #[test]
    fn reflection_is_a_symmetry_at_symmetric_gamma(a in 0.05..0.45f64, eps in 0.0..0.05f64, c in 0.05..1.0f64, y in point()) {
        let p = ModelParams::new(a, symmetric_gamma(a), eps, c).unwrap();
        let f = tw_vector_field(&y, &p);
        let fr = tw_vector_field(&reflect(&y, a), &p);
        // the linear part of R is -I, so equivariance reads F(Ry) = -F(y)
        for i in 0..3 {
            prop_assert!((fr[i] + f[i]).abs() <= 1e-10 * (1.0 + f[i].abs()));
        }
        let back = reflect(&reflect(&y, a), a);
        for i in 0..3 {
            prop_assert!((back[i] - y[i]).abs() <= 1e-14 * (1.0 + y[i].abs()));
        }
    }

    #[test]
    fn eigenvectors_satisfy_residual_and_biorthogonality(p in params(), y in point()) {
        let j = tw_jacobian(&y, &p);
        let e = eig3::eigen(&j);
        let scale = j.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
        for k in 0..3 {
            let (nu, r, l) = (e.values[k], e.right[k], e.left[k]);
            for i in 0..3 {
                let jr: C = (0..3).map(|m| r[m] * j[i][m]).sum();
                let lj: C = (0..3).map(|m| l[m] * j[m][i]).sum();
                prop_assert!((jr - nu * r[i]).norm() <= 1e-8 * scale);
                let ln: f64 = l.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                prop_assert!((lj - nu * l[i]).norm() <= 1e-8 * scale * ln);
            }
            for m in 0..3 {
                if m != k && (e.values[m] - nu).norm() > 1e-6 * (1.0 + scale) {
                    let dot: C = (0..3).map(|i| l[i] * e.right[m][i]).sum();
                    let ln: f64 = l.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    prop_assert!(dot.norm() <= 1e-8 * ln, "<l{k}, r{m}> = {dot}");
                }
            }
        }
    }
}

#[test]
fn reference_equilibria_are_saddles_with_one_unstable_direction() {
    let a = 0.25;
    let p = ModelParams::new(a, symmetric_gamma(a), 0.003, 0.2957).unwrap();
    let pts = find_equilibria(&p).unwrap();
    assert_eq!(pts.len(), 3);
    for pt in [pts[0], pts[2]] {
        let s = hyperbolic_splitting(&pt, &p).unwrap();
        assert_eq!(s.stable.len(), 2);
        assert_eq!(s.unstable.len(), 1);
        // left vectors annihilate the complementary subspace
        for l in &s.stable_left {
            let d: f64 = (0..3).map(|i| l[i] * s.unstable[0][i]).sum();
            assert!(d.abs() <= 1e-10);
        }
        let eq = spectral_split(&pt, &p).unwrap();
        assert!(eq.alpha_s > 0.0 && eq.alpha_u > 0.0);
    }
}

#[test]
fn invalid_parameters_are_rejected() {
    assert!(ModelParams::new(0.6, 1.0, 0.01, 0.3).is_err());
    assert!(ModelParams::new(0.25, -1.0, 0.01, 0.3).is_err());
    assert!(ModelParams::new(0.25, 1.0, -0.01, 0.3).is_err());
    assert!(ModelParams::new(0.25, 1.0, 0.01, 0.0).is_err());
    assert!(ModelParams::new(0.25, 1.0, f64::NAN, 0.3).is_err());
}
