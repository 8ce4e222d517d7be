//! Noise coefficient families and reproducible Brownian increments.
//!
//! Increments are addressed by `(trajectory, step, i, j)`. The pair `(i, j)` is
//! mapped to its position along the anti-diagonals `i + j = 2, 3, ...`, so the
//! pairs with `i + j <= D` form a prefix of every stream:
//!
//! ```text
//! index(i, j) = (i + j - 2)(i + j - 1)/2 + (i - 1)
//! ```
//!
//! Each `(trajectory, step)` owns one ChaCha8 stream keyed by the master seed
//! and trajectory, with the step as stream id; the normal at `index(i, j)` is
//! the `index`-th standard normal read from it, scaled by `sqrt(dt)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Real;

const STREAM_TAG: &[u8; 8] = b"dyadicW1";

/// Nonnegative noise coefficients `theta_1..theta_J`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaFamily<T: Real> {
    coefficients: Vec<T>,
    alpha1: Option<T>,
    eps_n: Option<T>,
    l2: T,
    linf: T,
}

impl<T: Real> ThetaFamily<T> {
    fn from_coefficients(coefficients: Vec<T>, alpha1: Option<T>, eps_n: Option<T>) -> Self {
        let l2 = coefficients.iter().map(|c| *c * *c).sum::<T>().sqrt();
        let linf = coefficients.iter().fold(T::zero(), |m, c| m.max(*c));
        Self { coefficients, alpha1, eps_n, l2, linf }
    }

    /// `theta_j = N^{-1/2}` for `j <= N`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::usage("uniform family needs N >= 1"));
        }
        let c = T::one() / T::from_usize_lossy(n).sqrt();
        Ok(Self::from_coefficients(vec![c; n], None, None))
    }

    /// `theta_j = sqrt(eps_N) j^{-alpha1}` with `eps_N = (sum_{j<=N} j^{-2 alpha1})^{-1}`.
    pub fn power_law(n: usize, alpha1: T) -> Result<Self> {
        if n == 0 {
            return Err(Error::usage("power-law family needs N >= 1"));
        }
        check_alpha1(alpha1)?;
        let raw: Vec<T> = (1..=n).map(|j| T::from_usize_lossy(j).powf(-alpha1)).collect();
        let mut acc = crate::scalar::CompensatedSum::new();
        for r in raw.iter().rev() {
            acc.add(*r * *r);
        }
        let eps = T::one() / acc.value();
        let s = eps.sqrt();
        let coeffs = raw.into_iter().map(|r| r * s).collect();
        Ok(Self::from_coefficients(coeffs, Some(alpha1), Some(eps)))
    }

    /// Unnormalized `j^{-alpha1}` for `j <= len`, the driver of the fluctuation limit.
    pub fn unnormalized_power(len: usize, alpha1: T) -> Result<Self> {
        check_alpha1(alpha1)?;
        let coeffs = (1..=len).map(|j| T::from_usize_lossy(j).powf(-alpha1)).collect();
        Ok(Self::from_coefficients(coeffs, Some(alpha1), None))
    }

    /// Arbitrary coefficients (stored as absolute values), optionally rescaled to unit `l2` norm.
    pub fn custom(coefficients: Vec<T>, normalize: bool) -> Result<Self> {
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::usage("theta coefficients must be finite"));
        }
        let mut c: Vec<T> = coefficients.into_iter().map(|v| v.abs()).collect();
        if normalize {
            let l2 = c.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if l2 == T::zero() {
                return Err(Error::usage("cannot normalize the zero sequence"));
            }
            c.iter_mut().for_each(|v| *v = *v / l2);
        }
        Ok(Self::from_coefficients(c, None, None))
    }

    /// `theta_j` (1-based), zero beyond the support.
    #[inline]
    pub fn get(&self, j: usize) -> T {
        if j == 0 {
            T::zero()
        } else {
            self.coefficients.get(j - 1).copied().unwrap_or_else(T::zero)
        }
    }

    pub fn coefficients(&self) -> &[T] {
        &self.coefficients
    }

    pub fn support_len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn l2(&self) -> T {
        self.l2
    }

    pub fn linf(&self) -> T {
        self.linf
    }

    pub fn alpha1(&self) -> Option<T> {
        self.alpha1
    }

    pub fn eps_n(&self) -> Option<T> {
        self.eps_n
    }

    pub fn is_normalized(&self) -> bool {
        (self.l2 - T::one()).abs() <= crate::sequence_space::normalization_tolerance()
    }

    /// `sum_{j<=m} theta_j^2`.
    pub fn partial_sq_sum(&self, m: usize) -> T {
        self.coefficients.iter().take(m).map(|c| *c * *c).sum()
    }
}

fn check_alpha1<T: Real>(alpha1: T) -> Result<()> {
    if !(alpha1 > T::zero() && alpha1 < T::lit(0.5)) {
        return Err(Error::usage(format!("power-law exponent must satisfy α₁ ∈ (0, 1/2), got {alpha1}")));
    }
    Ok(())
}

/// Position of `(i, j)` along the anti-diagonal enumeration (0-based).
#[inline]
pub fn pair_index(i: usize, j: usize) -> usize {
    let s = i + j;
    (s - 2) * (s - 1) / 2 + (i - 1)
}

/// Reproducible source of the increments `Delta W_{i,j}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianDriver {
    master_seed: u64,
    dt: f64,
    step_count: usize,
    i_max: usize,
    j_max: usize,
    trajectories: u64,
}

impl BrownianDriver {
    pub fn new(
        master_seed: u64,
        dt: f64,
        step_count: usize,
        index_bounds: (usize, usize),
        trajectories: u64,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::usage(format!("driver step must be positive, got {dt}")));
        }
        if index_bounds.0 == 0 || index_bounds.1 == 0 {
            return Err(Error::usage("driver index bounds must be at least 1"));
        }
        Ok(Self { master_seed, dt, step_count, i_max: index_bounds.0, j_max: index_bounds.1, trajectories })
    }

    /// Bounds `i, j <= D - 1` of a system truncated at `D` shells.
    pub fn galerkin(master_seed: u64, dt: f64, step_count: usize, dim: usize, trajectories: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::usage("noise needs at least two shells"));
        }
        Self::new(master_seed, dt, step_count, (dim - 1, dim - 1), trajectories)
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn index_bounds(&self) -> (usize, usize) {
        (self.i_max, self.j_max)
    }

    pub fn trajectories(&self) -> u64 {
        self.trajectories
    }

    fn stream(&self, trajectory: u64, step: usize) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&trajectory.to_le_bytes());
        key[16..24].copy_from_slice(STREAM_TAG);
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(step as u64);
        rng
    }

    fn check_cell(&self, trajectory: u64, step: usize) -> Result<()> {
        if trajectory >= self.trajectories {
            return Err(Error::index(format!("trajectory {trajectory} outside 0..{}", self.trajectories)));
        }
        if step >= self.step_count {
            return Err(Error::index(format!("step {step} outside 0..{}", self.step_count)));
        }
        Ok(())
    }

    /// Increments for every pair with `i + j <= max_sum`, in `pair_index` order.
    pub fn fill_triangle(&self, trajectory: u64, step: usize, max_sum: usize, out: &mut Vec<f64>) -> Result<()> {
        self.check_cell(trajectory, step)?;
        if max_sum < 2 || max_sum > self.i_max + self.j_max {
            return Err(Error::index(format!("triangle i + j <= {max_sum} exceeds driver bounds")));
        }
        let count = max_sum * (max_sum - 1) / 2;
        let sq = self.dt.sqrt();
        let mut rng = self.stream(trajectory, step);
        out.clear();
        out.extend((0..count).map(|_| sq * rng.sample::<f64, _>(StandardNormal)));
        Ok(())
    }

    /// Single increment `Delta W_{i,j}` at the given step.
    pub fn increment(&self, trajectory: u64, step: usize, i: usize, j: usize) -> Result<f64> {
        self.check_cell(trajectory, step)?;
        self.check_pair(i, j)?;
        let k = pair_index(i, j);
        let mut rng = self.stream(trajectory, step);
        for _ in 0..k {
            let _: f64 = rng.sample(StandardNormal);
        }
        Ok(self.dt.sqrt() * rng.sample::<f64, _>(StandardNormal))
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<()> {
        if i == 0 || j == 0 || i > self.i_max || j > self.j_max {
            return Err(Error::index(format!("pair ({i},{j}) outside bounds ({}, {})", self.i_max, self.j_max)));
        }
        Ok(())
    }
}

/// All increments of one step on the rectangle `i <= I_max`, `j <= J_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseIncrementBlock {
    i_max: usize,
    j_max: usize,
    values: Vec<f64>,
}

impl NoiseIncrementBlock {
    pub fn get(&self, i: usize, j: usize) -> Result<f64> {
        if i == 0 || j == 0 || i > self.i_max || j > self.j_max {
            return Err(Error::index(format!("pair ({i},{j}) outside block")));
        }
        Ok(self.values[(i - 1) * self.j_max + (j - 1)])
    }

    pub fn bounds(&self) -> (usize, usize) {
        (self.i_max, self.j_max)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn sample_increment_block(driver: &BrownianDriver, trajectory: u64, step: usize) -> Result<NoiseIncrementBlock> {
    driver.check_cell(trajectory, step)?;
    let (i_max, j_max) = driver.index_bounds();
    let last = pair_index(i_max, j_max).max(pair_index(1, j_max)).max(pair_index(i_max, 1));
    let sq = driver.dt.sqrt();
    let mut rng = driver.stream(trajectory, step);
    let stream: Vec<f64> = (0..=last).map(|_| sq * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut values = vec![0.0; i_max * j_max];
    for i in 1..=i_max {
        for j in 1..=j_max {
            values[(i - 1) * j_max + (j - 1)] = stream[pair_index(i, j)];
        }
    }
    Ok(NoiseIncrementBlock { i_max, j_max, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_examples() {
        let e1 = ThetaFamily::<f64>::uniform(1).unwrap();
        assert_eq!(e1.coefficients(), &[1.0]);
        let u4 = ThetaFamily::<f64>::uniform(4).unwrap();
        assert!(u4.coefficients().iter().all(|c| *c == 0.5));
        assert_eq!(u4.linf(), 0.5);
        assert_eq!(u4.l2(), 1.0);
        let u100 = ThetaFamily::<f64>::uniform(100).unwrap();
        assert_relative_eq!(u100.linf(), 0.1, max_relative = 1e-15);
        assert!(matches!(ThetaFamily::<f64>::uniform(0), Err(Error::Usage(_))));
    }

    #[test]
    fn power_law_examples() {
        let p1 = ThetaFamily::<f64>::power_law(1, 0.3).unwrap();
        assert_eq!(p1.coefficients(), &[1.0]);
        assert_eq!(p1.eps_n(), Some(1.0));
        let p2 = ThetaFamily::<f64>::power_law(2, 0.25).unwrap();
        assert_relative_eq!(p2.eps_n().unwrap(), 0.585786437626905, max_relative = 1e-12);
        assert_relative_eq!(p2.get(1), 0.765366864730180, max_relative = 1e-12);
        for n in [3, 17, 200] {
            assert!((ThetaFamily::<f64>::power_law(n, 0.4).unwrap().l2() - 1.0).abs() <= 1e-12);
        }
        let err = ThetaFamily::<f64>::power_law(4, 0.7).unwrap_err();
        assert!(err.to_string().contains("α₁ ∈ (0, 1/2)"));
    }

    #[test]
    fn custom_family_is_nonnegative_and_normalized() {
        let t = ThetaFamily::<f64>::custom(vec![-3.0, 4.0], true).unwrap();
        assert_eq!(t.coefficients(), &[0.6, 0.8]);
        assert!(t.is_normalized());
    }

    #[test]
    fn pair_index_enumerates_triangle_prefix() {
        let d = 7;
        let mut seen = vec![false; d * (d - 1) / 2];
        for i in 1..d {
            for j in 1..=(d - i) {
                let k = pair_index(i, j);
                assert!(!seen[k]);
                seen[k] = true;
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn increments_are_reproducible_and_bound_independent() {
        let a = BrownianDriver::new(7, 0.01, 10, (5, 5), 4).unwrap();
        let b = BrownianDriver::new(7, 0.01, 10, (9, 3), 4).unwrap();
        let blk_a = sample_increment_block(&a, 2, 3).unwrap();
        assert_eq!(blk_a, sample_increment_block(&a, 2, 3).unwrap());
        let blk_b = sample_increment_block(&b, 2, 3).unwrap();
        assert_eq!(blk_a.get(4, 2).unwrap(), blk_b.get(4, 2).unwrap());
        assert_eq!(blk_a.get(4, 2).unwrap(), a.increment(2, 3, 4, 2).unwrap());
        let mut tri = Vec::new();
        a.fill_triangle(2, 3, 6, &mut tri).unwrap();
        assert_eq!(tri[pair_index(3, 3)], blk_a.get(3, 3).unwrap());
        assert_ne!(blk_a, sample_increment_block(&a, 2, 4).unwrap());
        assert_ne!(blk_a, sample_increment_block(&a, 1, 3).unwrap());
    }

    #[test]
    fn out_of_range_requests_fail() {
        let d = BrownianDriver::galerkin(1, 0.1, 5, 4, 2).unwrap();
        assert!(matches!(sample_increment_block(&d, 2, 0), Err(Error::Index(_))));
        assert!(matches!(sample_increment_block(&d, 0, 5), Err(Error::Index(_))));
        assert!(matches!(d.increment(0, 0, 4, 1), Err(Error::Index(_))));
        let mut v = Vec::new();
        assert!(matches!(d.fill_triangle(0, 0, 7, &mut v), Err(Error::Index(_))));
    }
}
