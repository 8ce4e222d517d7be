//! Second moments `Y_n(t) = E[X_n(t)^2]` of the linear model.
//!
//! They solve the closed linear system `Y' = Y M` with the symmetric matrix
//!
//! ```text
//! m_{n,n} = -2 nu (lambda^{2n} + sum_{j<n} theta_j^2 lambda^{2(n-j)})
//! m_{n,j} = 2 nu lambda^{2j} theta_{n-j}^2,   n > j
//! ```
//!
//! Truncated to `D_M` rows, the rows lose mass to the discarded shells. The
//! [`Closure::Galerkin`] diagonal instead matches the system truncated at `D_M`
//! shells, whose rows are exactly conservative.

use nalgebra::{DMatrix, DVector, RealField};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::ThetaFamily;
use crate::scalar::{CompensatedSum, Real};
use crate::stochastic::StochPath;

/// Diagonal used by [`build_m`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Closure {
    /// Entries of the infinite matrix restricted to the first `D_M` shells.
    Full,
    /// Diagonal of the system truncated at `D_M` shells.
    Galerkin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentMatrix<T: Real> {
    diag: Vec<T>,
    /// `lower[n][j] = m_{n+1, j+1}` for `j < n`.
    lower: Vec<Vec<T>>,
    closure: Closure,
}

impl<T: Real> MomentMatrix<T> {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn closure(&self) -> Closure {
        self.closure
    }

    pub fn diag(&self) -> &[T] {
        &self.diag
    }

    /// Entry `m_{n,j}`, 1-based.
    pub fn get(&self, n: usize, j: usize) -> T {
        assert!(n >= 1 && j >= 1 && n <= self.dim() && j <= self.dim(), "entry ({n}, {j}) outside {}", self.dim());
        match n.cmp(&j) {
            std::cmp::Ordering::Equal => self.diag[n - 1],
            std::cmp::Ordering::Greater => self.lower[n - 1][j - 1],
            std::cmp::Ordering::Less => self.lower[j - 1][n - 1],
        }
    }

    /// Dense row-major copy.
    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let d = self.dim();
        (1..=d).map(|n| (1..=d).map(|j| self.get(n, j)).collect()).collect()
    }
}

/// Moment matrix on `d_m` shells.
pub fn build_m<T: Real>(theta: &ThetaFamily<T>, lambda: T, nu: T, d_m: usize, closure: Closure) -> Result<MomentMatrix<T>> {
    if !(lambda > T::one()) {
        return Err(Error::usage(format!("lambda must exceed 1, got {lambda}")));
    }
    if d_m == 0 {
        return Err(Error::usage("moment system needs D_M >= 1"));
    }
    if !(nu >= T::zero()) {
        return Err(Error::usage(format!("nu must be nonnegative, got {nu}")));
    }
    if closure == Closure::Full && !theta.is_normalized() {
        return Err(Error::usage(format!("moment matrix needs |theta|_l2 = 1, got {}", theta.l2())));
    }
    let two_nu = T::lit(2.0) * nu;
    let lp = |k: usize| lambda.powi(2 * k as i32);
    let th2 = |j: usize| {
        let t = theta.get(j);
        t * t
    };
    let lower: Vec<Vec<T>> = (1..=d_m).map(|n| (1..n).map(|j| two_nu * lp(j) * th2(n - j)).collect()).collect();
    let diag = (1..=d_m)
        .map(|n| {
            let mut up = CompensatedSum::new();
            for j in 1..n {
                up.add(th2(j) * lp(n - j));
            }
            let top = match closure {
                Closure::Full => lp(n),
                Closure::Galerkin => lp(n) * theta.partial_sq_sum(d_m - n),
            };
            -two_nu * (top + up.value())
        })
        .collect();
    Ok(MomentMatrix { diag, lower, closure })
}

/// Row sums of `M` next to the analytic truncation deficit.
#[derive(Clone, Debug, PartialEq)]
pub struct RowConservation<T: Real> {
    /// `m_{n,n} + sum_{j != n} m_{n,j}`.
    pub residual: Vec<T>,
    /// `-2 nu lambda^{2n} (1 - sum_{k <= D_M - n} theta_k^2)`.
    pub deficit: Vec<T>,
}

pub fn row_conservation_residual<T: Real>(m: &MomentMatrix<T>, theta: &ThetaFamily<T>, lambda: T, nu: T) -> RowConservation<T> {
    let d = m.dim();
    let residual = (1..=d)
        .map(|n| {
            let mut acc = CompensatedSum::new();
            for j in (1..=d).rev() {
                acc.add(m.get(n, j));
            }
            acc.value()
        })
        .collect();
    let deficit = (1..=d)
        .map(|n| -T::lit(2.0) * nu * lambda.powi(2 * n as i32) * (T::one() - theta.partial_sq_sum(d - n)))
        .collect();
    RowConservation { residual, deficit }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentTrajectory<T: Real> {
    pub times: Vec<T>,
    pub values: Vec<Vec<T>>,
    pub total_mass: Vec<T>,
}

impl<T: Real> MomentTrajectory<T> {
    /// Index of the grid time closest to `t`.
    pub fn nearest(&self, t: T) -> Option<usize> {
        (0..self.times.len()).min_by(|a, b| {
            let da = (self.times[*a] - t).abs();
            let db = (self.times[*b] - t).abs();
            da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
        })
    }
}

/// Implicit Euler for `Y' = Y M`, one LU factorization of `I - dt M^T`.
pub fn evolve_moments<T: Real + RealField>(y0: &[T], m: &MomentMatrix<T>, t_end: T, dt: T) -> Result<MomentTrajectory<T>> {
    let d = m.dim();
    if y0.len() != d {
        return Err(Error::usage(format!("Y0 has {} entries, M has {d} rows", y0.len())));
    }
    if let Some(k) = y0.iter().position(|v| !(*v >= T::zero())) {
        return Err(Error::usage(format!("Y0 must be nonnegative, shell {} is {}", k + 1, y0[k])));
    }
    let steps = crate::deterministic::step_count(t_end, dt)?;
    let a = DMatrix::from_fn(d, d, |r, c| {
        let id = if r == c { T::one() } else { T::zero() };
        id - dt * m.get(c + 1, r + 1)
    });
    let lu = a.lu();
    let mass = |v: &[T]| {
        let mut acc = CompensatedSum::new();
        for x in v.iter().rev() {
            acc.add(*x);
        }
        acc.value()
    };
    let mut traj = MomentTrajectory {
        times: Vec::with_capacity(steps + 1),
        values: Vec::with_capacity(steps + 1),
        total_mass: Vec::with_capacity(steps + 1),
    };
    let mut y = DVector::from_column_slice(y0);
    traj.times.push(T::zero());
    traj.values.push(y0.to_vec());
    traj.total_mass.push(mass(y0));
    let tol = T::lit(1e-10);
    for k in 1..=steps {
        y = lu.solve(&y).ok_or_else(|| Error::Scheme("singular implicit Euler matrix".into()))?;
        let v: Vec<T> = y.iter().copied().collect();
        if let Some(n) = v.iter().position(|x| !(*x >= -tol)) {
            return Err(Error::Scheme(format!("negative second moment {} at shell {}, step {k}", v[n], n + 1)));
        }
        let total = mass(&v);
        let prev = *traj.total_mass.last().unwrap_or(&total);
        if total > prev + tol * num_traits::Float::max(prev, T::one()) {
            return Err(Error::Scheme(format!("total mass grew from {prev} to {total} at step {k}")));
        }
        traj.times.push(T::from_usize_lossy(k) * dt);
        traj.values.push(v);
        traj.total_mass.push(total);
    }
    Ok(traj)
}

/// Monte Carlo mean of `X_n^2` against the moment oracle at one time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentZScore {
    pub time: f64,
    pub shell: usize,
    pub mc_mean: f64,
    pub standard_error: f64,
    pub oracle: f64,
    pub z: f64,
}

/// `z = (mean X_n^2 - Y_n) / SE` at each checkpoint; `0/0` counts as 0.
pub fn compare_mc_moments<T: Real>(
    paths: &[StochPath<T>],
    moments: &MomentTrajectory<T>,
    checkpoints: &[T],
) -> Result<Vec<MomentZScore>> {
    let Some(first) = paths.first() else {
        return Err(Error::usage("empty ensemble"));
    };
    let d = first.states.first().map_or(0, |s| s.dim());
    if moments.values.first().map_or(0, |v| v.len()) != d {
        return Err(Error::usage("ensemble and moment trajectory differ in dimension"));
    }
    let samples = paths.len() as f64;
    let mut out = Vec::with_capacity(checkpoints.len() * d);
    for &t in checkpoints {
        let mi = moments.nearest(t).ok_or_else(|| Error::usage("empty moment trajectory"))?;
        let pi = nearest_time(&first.times, t)?;
        let grid_tol = T::lit(1e-9) * t.abs().max(T::one());
        if (moments.times[mi] - t).abs() > grid_tol || (first.times[pi] - t).abs() > grid_tol {
            return Err(Error::usage(format!("checkpoint {t} is not on both time grids")));
        }
        for n in 0..d {
            let mut sum = CompensatedSum::new();
            for p in paths {
                let v = p.states[pi].values()[n].to_f64_lossy();
                sum.add(v * v);
            }
            let mean = sum.value() / samples;
            let mut ss = CompensatedSum::new();
            for p in paths {
                let v = p.states[pi].values()[n].to_f64_lossy();
                ss.add((v * v - mean).powi(2));
            }
            let var = if paths.len() > 1 { ss.value() / (samples - 1.0) } else { 0.0 };
            let se = (var / samples).sqrt();
            let oracle = moments.values[mi][n].to_f64_lossy();
            let diff = mean - oracle;
            let z = if se > 0.0 {
                diff / se
            } else if diff == 0.0 {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            };
            out.push(MomentZScore { time: t.to_f64_lossy(), shell: n + 1, mc_mean: mean, standard_error: se, oracle, z });
        }
    }
    Ok(out)
}

fn nearest_time<T: Real>(times: &[T], t: T) -> Result<usize> {
    (0..times.len())
        .min_by(|a, b| (times[*a] - t).abs().partial_cmp(&(times[*b] - t).abs()).unwrap_or(std::cmp::Ordering::Equal))
        .ok_or_else(|| Error::usage("empty path"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn e1() -> ThetaFamily<f64> {
        ThetaFamily::uniform(1).unwrap()
    }

    #[test]
    fn two_shell_entries() {
        let m = build_m(&e1(), 2.0, 0.5, 2, Closure::Full).unwrap();
        assert_eq!(m.get(1, 1), -4.0);
        assert_eq!(m.get(1, 2), 4.0);
        assert_eq!(m.get(2, 1), 4.0);
        assert_eq!(m.get(2, 2), -20.0);
    }

    #[test]
    fn zero_intensity_gives_zero_matrix() {
        let th = ThetaFamily::uniform(3).unwrap();
        let m = build_m(&th, 2.0, 0.0, 5, Closure::Full).unwrap();
        assert!(m.to_dense().iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn rows_match_truncation_deficit() {
        let th = ThetaFamily::power_law(5, 0.3).unwrap();
        let m = build_m(&th, 2.0, 0.7, 6, Closure::Full).unwrap();
        let rc = row_conservation_residual(&m, &th, 2.0, 0.7);
        for (r, d) in rc.residual.iter().zip(&rc.deficit) {
            assert_relative_eq!(*r, *d, epsilon = 1e-9 * f64::max(f64::abs(*d), 1.0));
        }
        let g = build_m(&th, 2.0, 0.7, 6, Closure::Galerkin).unwrap();
        let rg = row_conservation_residual(&g, &th, 2.0, 0.7);
        for (n, r) in rg.residual.iter().enumerate() {
            assert!(f64::abs(*r) <= 1e-12 * 4f64.powi(n as i32 + 1), "row {} residual {r}", n + 1);
        }
    }

    #[test]
    fn single_neighbour_rows_conserve_below_top() {
        let m = build_m(&e1(), 2.0, 1.0, 5, Closure::Full).unwrap();
        let rc = row_conservation_residual(&m, &e1(), 2.0, 1.0);
        for n in 0..4 {
            assert!(rc.residual[n].abs() <= 1e-12 * 4f64.powi(n as i32 + 1));
        }
        assert_eq!(rc.residual[4], -2.0 * 4f64.powi(5));
    }

    #[test]
    fn scalar_system_decays_exponentially() {
        let m = build_m(&e1(), 2.0, 0.5, 1, Closure::Full).unwrap();
        let dt = 1e-5;
        let tr = evolve_moments(&[2.0], &m, 0.1, dt).unwrap();
        let exact = 2.0 * (-4.0f64 * 0.1).exp();
        let last = tr.values.last().unwrap()[0];
        assert_relative_eq!(last, exact, max_relative = 1e-5);
        assert_relative_eq!(last, 2.0 * (1.0 + 4.0 * dt).powi(-10_000), max_relative = 1e-10);
    }

    #[test]
    fn zero_data_stays_zero_and_mass_decays() {
        let th = ThetaFamily::uniform(3).unwrap();
        let m = build_m(&th, 2.0, 1.0, 5, Closure::Full).unwrap();
        let tr = evolve_moments(&[0.0; 5], &m, 0.05, 1e-3).unwrap();
        assert!(tr.values.iter().flatten().all(|v| *v == 0.0));
        let tr = evolve_moments(&[1.0, 0.5, 0.0, 0.0, 0.0], &m, 0.05, 1e-3).unwrap();
        assert!(tr.total_mass.windows(2).all(|w| w[1] <= w[0]));
        assert!(*tr.total_mass.last().unwrap() > 0.0);
    }

    #[test]
    fn negative_initial_data_rejected() {
        let m = build_m(&e1(), 2.0, 1.0, 2, Closure::Full).unwrap();
        assert!(matches!(evolve_moments(&[1.0, -0.1], &m, 0.1, 0.01), Err(Error::Usage(_))));
    }
}
