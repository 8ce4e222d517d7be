use dyadic_core::noise::{pair_index, sample_increment_block, BrownianDriver, ThetaFamily};
use dyadic_core::stats::{mean, variance};
use proptest::prelude::*;

#[test]
fn increments_have_brownian_moments() {
    let dt = 0.01;
    let d = BrownianDriver::new(7, dt, 100_000, (4, 4), 1).unwrap();
    let mut draws = Vec::with_capacity(1_000_000);
    let mut buf = vec![];
    for step in 0..100_000 {
        d.fill_triangle(0, step, 5, &mut buf).unwrap();
        draws.extend_from_slice(&buf);
    }
    assert_eq!(draws.len(), 1_000_000);
    // 5 standard errors of mean and variance for Gaussian samples
    let n = draws.len() as f64;
    assert!(mean(&draws).abs() <= 5.0 * (dt / n).sqrt());
    assert!((variance(&draws) - dt).abs() <= 5.0 * dt * (2.0 / n).sqrt());
    let k4 = draws.iter().map(|v| v.powi(4)).sum::<f64>() / n / (dt * dt);
    assert!((k4 - 3.0).abs() < 0.05, "fourth moment {k4}");
}

#[test]
fn distinct_cells_are_uncorrelated() {
    let d = BrownianDriver::new(3, 1.0, 50_000, (3, 3), 2).unwrap();
    let n = 50_000;
    let a: Vec<f64> = (0..n).map(|k| d.increment(0, k, 1, 1).unwrap()).collect();
    let b: Vec<f64> = (0..n).map(|k| d.increment(0, k, 2, 1).unwrap()).collect();
    let c: Vec<f64> = (0..n).map(|k| d.increment(1, k, 1, 1).unwrap()).collect();
    let lag: Vec<f64> = (0..n).map(|k| d.increment(0, (k + 1) % n, 1, 1).unwrap()).collect();
    let corr = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>() / n as f64;
    let bound = 5.0 / (n as f64).sqrt();
    for (name, y) in [("pair", &b), ("trajectory", &c), ("step", &lag)] {
        let r = corr(&a, y);
        assert!(r.abs() < bound, "{name} correlation {r}");
    }
}

#[test]
fn triangle_is_a_prefix_independent_of_bounds() {
    let small = BrownianDriver::new(11, 0.1, 4, (2, 2), 3).unwrap();
    let large = BrownianDriver::new(11, 0.1, 4, (9, 9), 3).unwrap();
    let (mut a, mut b) = (vec![], vec![]);
    small.fill_triangle(2, 3, 4, &mut a).unwrap();
    large.fill_triangle(2, 3, 10, &mut b).unwrap();
    assert_eq!(a.as_slice(), &b[..a.len()]);
    for i in 1..=2 {
        for j in 1..=2 {
            let w = small.increment(2, 3, i, j).unwrap();
            assert_eq!(w, a[pair_index(i, j)]);
            assert_eq!(w, large.increment(2, 3, i, j).unwrap());
        }
    }
    let block = sample_increment_block(&small, 2, 3).unwrap();
    assert_eq!(block.get(2, 1).unwrap(), a[pair_index(2, 1)]);
}

#[test]
fn out_of_range_cells_are_index_errors() {
    let d = BrownianDriver::new(0, 0.1, 4, (2, 3), 2).unwrap();
    assert!(d.increment(2, 0, 1, 1).is_err());
    assert!(d.increment(0, 4, 1, 1).is_err());
    assert!(d.increment(0, 0, 3, 1).is_err());
    assert!(d.increment(0, 0, 1, 4).is_err());
    assert!(d.increment(0, 0, 2, 3).is_ok());
}

proptest! {
    #[test]
    fn pair_index_enumerates_antidiagonals(s in 2usize..60) {
        let first = pair_index(1, s - 1);
        prop_assert_eq!(first, (s - 2) * (s - 1) / 2);
        for i in 1..s {
            prop_assert_eq!(pair_index(i, s - i), first + i - 1);
        }
    }

    #[test]
    fn families_are_normalized(n in 1usize..300, alpha1 in 0.01f64..0.49) {
        let u = ThetaFamily::<f64>::uniform(n).unwrap();
        prop_assert!((u.l2() - 1.0).abs() < 1e-12);
        prop_assert!((u.linf() - 1.0 / (n as f64).sqrt()).abs() < 1e-15);
        let p = ThetaFamily::<f64>::power_law(n, alpha1).unwrap();
        prop_assert!((p.l2() - 1.0).abs() < 1e-12);
        let eps = p.eps_n().unwrap();
        prop_assert!((p.get(1) - eps.sqrt()).abs() < 1e-14);
        prop_assert!((p.linf() - p.get(1)).abs() < 1e-15);
        prop_assert!(p.is_normalized());
    }

    #[test]
    fn partial_sums_accumulate_squares(v in prop::collection::vec(0.0f64..2.0, 1..20), m in 0usize..25) {
        let t = ThetaFamily::custom(v.clone(), false).unwrap();
        let want: f64 = v.iter().take(m).map(|c| c * c).sum();
        prop_assert!((t.partial_sq_sum(m) - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn power_law_sup_norm_decays() {
    let a: Vec<f64> = [4usize, 16, 64, 256].iter().map(|n| ThetaFamily::power_law(*n, 0.25).unwrap().linf()).collect();
    assert!(a.windows(2).all(|w| w[1] < w[0]));
}
