use dyadic_core::moments::{build_m, row_conservation_residual, Closure};
use dyadic_core::noise::ThetaFamily;
use dyadic_core::sequence_space::{
    bilinear_b, bilinear_bound_constant, build_corrector_s_theta, build_s_alpha, hs_norm, semigroup_apply,
    smoothing_constant, ShellVector, SobolevIndex,
};
use dyadic_core::stochastic::{simulate, Model, Scheme, SdeConfig};
use proptest::prelude::*;

fn sv(v: Vec<f64>, lambda: f64) -> ShellVector<f64> {
    ShellVector::new(v, lambda).unwrap()
}

fn vector(max_dim: usize) -> impl Strategy<Value = Vec<f64>> {
    (2..=max_dim).prop_flat_map(|d| prop::collection::vec(-1.0f64..1.0, d))
}

fn vectors3(max_dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2..=max_dim).prop_flat_map(|d| {
        let v = || prop::collection::vec(-1.0f64..1.0, d);
        (v(), v(), v())
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairs `(i, j)` with `i + j <= d` and coefficient `theta_j lambda^i`.
fn pairs(theta: &ThetaFamily<f64>, lambda: f64, d: usize) -> Vec<(usize, usize, f64)> {
    let mut p = vec![];
    for i in 1..d {
        for j in 1..=(d - i) {
            let c = theta.get(j) * lambda.powi(i as i32);
            if c != 0.0 {
                p.push((i, i + j, c));
            }
        }
    }
    p
}

/// Diagonal of `sum_p c_p^2 A_p^2` from dense plane rotations.
fn dense_corrector(theta: &ThetaFamily<f64>, lambda: f64, d: usize) -> Vec<Vec<f64>> {
    let mut acc = vec![vec![0.0; d]; d];
    for (a, b, c) in pairs(theta, lambda, d) {
        let mut gen = vec![vec![0.0; d]; d];
        gen[b - 1][a - 1] = 1.0;
        gen[a - 1][b - 1] = -1.0;
        for r in 0..d {
            for s in 0..d {
                let sq: f64 = (0..d).map(|k| gen[r][k] * gen[k][s]).sum();
                acc[r][s] += c * c * sq;
            }
        }
    }
    acc
}

/// Generator of `E X_n^2` for `dX = sqrt(2 nu) sum_p c_p A_p X o dW_p` on `d` shells.
fn dense_moment_generator(theta: &ThetaFamily<f64>, lambda: f64, nu: f64, d: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; d]; d];
    for (a, b, c) in pairs(theta, lambda, d) {
        let k = 2.0 * nu * c * c;
        m[a - 1][a - 1] -= k;
        m[b - 1][b - 1] -= k;
        m[a - 1][b - 1] += k;
        m[b - 1][a - 1] += k;
    }
    m
}

fn theta_strategy() -> impl Strategy<Value = ThetaFamily<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..6)
        .prop_filter("nonzero", |v| v.iter().any(|c| *c > 1e-3))
        .prop_map(|v| ThetaFamily::custom(v, true).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cascade_is_orthogonal_to_its_second_argument((x, y, _) in vectors3(12), lambda in 1.1f64..3.0) {
        let d = x.len();
        let b = bilinear_b(&sv(x.clone(), lambda), &sv(y.clone(), lambda)).unwrap();
        let nx = dot(&x, &x).sqrt();
        let ny = dot(&y, &y).sqrt();
        prop_assert!(dot(b.values(), &y).abs() <= 1e-12 * nx * ny * lambda.powi(d as i32));
    }

    #[test]
    fn cascade_is_skew_in_last_two_arguments((x, y, z) in vectors3(12), lambda in 1.1f64..3.0) {
        let d = x.len();
        let l = lambda;
        let byz = dot(bilinear_b(&sv(x.clone(), l), &sv(y.clone(), l)).unwrap().values(), &z);
        let bzy = dot(bilinear_b(&sv(x.clone(), l), &sv(z.clone(), l)).unwrap().values(), &y);
        prop_assert!((byz + bzy).abs() <= 1e-12 * lambda.powi(d as i32) * (d as f64));
    }

    #[test]
    fn cascade_bilinear_bound((x, y, _) in vectors3(12), lambda in 1.1f64..3.0, a in -1.0f64..1.5, b in -1.0f64..1.5) {
        let (xs, ys) = (sv(x, lambda), sv(y, lambda));
        let lhs = hs_norm(&bilinear_b(&xs, &ys).unwrap(), SobolevIndex(-1.0 + a + b)).unwrap();
        let rhs = bilinear_bound_constant(lambda, a, b)
            * hs_norm(&xs, SobolevIndex(a)).unwrap()
            * hs_norm(&ys, SobolevIndex(b)).unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12));
    }

    #[test]
    fn semigroup_smoothing_bound(x in vector(12), lambda in 1.1f64..3.0, a in -1.0f64..1.0, rho in 0.01f64..2.0, lt in -4.0f64..1.0) {
        let t = 10f64.powf(lt);
        let xs = sv(x, lambda);
        let s = build_s_alpha(1.0, lambda, xs.dim()).unwrap();
        let y = semigroup_apply(t, 1.0, &s, &xs).unwrap();
        let lhs = hs_norm(&y, SobolevIndex(a + rho)).unwrap();
        let rhs = smoothing_constant(rho) * t.powf(-rho / 2.0) * hs_norm(&xs, SobolevIndex(a)).unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12));
    }

    #[test]
    fn semigroup_continuity_bound(x in vector(12), lambda in 1.1f64..3.0, a in -1.0f64..1.0, rho in 0.0f64..=2.0, lt in -4.0f64..1.0) {
        let t = 10f64.powf(lt);
        let xs = sv(x, lambda);
        let s = build_s_alpha(1.0, lambda, xs.dim()).unwrap();
        let y = semigroup_apply(t, 1.0, &s, &xs).unwrap();
        let diff = xs.sub(&y).unwrap();
        let lhs = hs_norm(&diff, SobolevIndex(a - rho)).unwrap();
        let rhs = t.powf(rho / 2.0) * hs_norm(&xs, SobolevIndex(a)).unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12));
    }

    #[test]
    fn galerkin_corrector_matches_dense_rotations(theta in theta_strategy(), lambda in 1.1f64..3.0, d in 2usize..9) {
        let dense = dense_corrector(&theta, lambda, d);
        let c = build_corrector_s_theta(&theta, lambda, d, Some(d)).unwrap();
        for n in 0..d {
            for m in 0..d {
                let want = if n == m { c.entries()[n] } else { 0.0 };
                prop_assert!((dense[n][m] - want).abs() <= 1e-12 * lambda.powi(2 * d as i32));
            }
        }
    }

    #[test]
    fn galerkin_corrector_equals_closed_form_below_the_cutoff(theta in theta_strategy(), lambda in 1.1f64..3.0, d in 2usize..9) {
        let big = d + theta.support_len();
        let full = build_corrector_s_theta(&theta, lambda, d, None).unwrap();
        let gal = build_corrector_s_theta(&theta, lambda, big, Some(big)).unwrap();
        for n in 0..d {
            prop_assert!((full.entries()[n] - gal.entries()[n]).abs() <= 1e-12 * lambda.powi(2 * (n as i32 + 1)));
        }
    }

    #[test]
    fn moment_matrix_symmetric_and_linear_in_nu(theta in theta_strategy(), lambda in 1.1f64..3.0, nu in 0.01f64..5.0, d in 1usize..10) {
        for closure in [Closure::Full, Closure::Galerkin] {
            let m1 = build_m(&theta, lambda, nu, d, closure).unwrap().to_dense();
            let m2 = build_m(&theta, lambda, 2.0 * nu, d, closure).unwrap().to_dense();
            for n in 0..d {
                for j in 0..d {
                    prop_assert_eq!(m1[n][j], m1[j][n]);
                    prop_assert!((m2[n][j] - 2.0 * m1[n][j]).abs() <= 1e-12 * m2[n][j].abs());
                }
            }
        }
    }

    #[test]
    fn galerkin_moment_matrix_matches_dense_generator(theta in theta_strategy(), lambda in 1.1f64..3.0, nu in 0.01f64..5.0, d in 2usize..9) {
        let dense = dense_moment_generator(&theta, lambda, nu, d);
        let m = build_m(&theta, lambda, nu, d, Closure::Galerkin).unwrap();
        let scale = 2.0 * nu * lambda.powi(2 * d as i32);
        for n in 0..d {
            for j in 0..d {
                prop_assert!((m.get(n + 1, j + 1) - dense[n][j]).abs() <= 1e-12 * scale);
            }
        }
        let rc = row_conservation_residual(&m, &theta, lambda, nu);
        prop_assert!(rc.residual.iter().all(|r| r.abs() <= 1e-12 * scale));
    }

    #[test]
    fn full_moment_matrix_is_restriction_of_larger_system(theta in theta_strategy(), lambda in 1.1f64..3.0, d in 1usize..8) {
        let big = d + theta.support_len();
        let dense = dense_moment_generator(&theta, lambda, 1.0, big);
        let m = build_m(&theta, lambda, 1.0, d, Closure::Full).unwrap();
        let scale = 2.0 * lambda.powi(2 * big as i32);
        for n in 0..d {
            for j in 0..d {
                prop_assert!((m.get(n + 1, j + 1) - dense[n][j]).abs() <= 1e-12 * scale);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rotation_split_linear_paths_keep_their_norm(x in vector(8), seed in any::<u64>(), n in 1usize..5) {
        let d = x.len();
        let x0 = sv(x, 2.0);
        let mut cfg = SdeConfig::new(x0.clone(), 1.0, ThetaFamily::uniform(n).unwrap(), 0.05, 1e-3, seed, 1).unwrap();
        cfg.model = Model::LinearGirsanov;
        cfg.scheme = Scheme::StratonovichRotationSplit;
        let p = simulate(&cfg, 0).unwrap();
        let n0 = x0.l2_norm();
        prop_assert!(p.l2_norm.iter().all(|v| (v - n0).abs() <= 1e-13 * n0.max(1e-300) * d as f64));
    }
}
