//! Deterministic viscous dyadic model `X' = B(X) + nu S^alpha X`.
//!
//! The diagonal is integrated exactly and the cascade term explicitly:
//!
//! ```text
//! Euler: x' = E (x + dt B(x))
//! Heun:  y  = E (x + dt B(x)),   x' = E (x + dt/2 B(x)) + dt/2 B(y)
//! E = exp(-nu dt lambda^{2 alpha n})
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{CompensatedSum, Real};
use crate::sequence_space::{bilinear_into, l2_norm_sq, sobolev_weights, weighted_norm_sq, LambdaPowers, ShellVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetScheme {
    ExponentialEuler,
    ExponentialHeun,
}

#[derive(Clone, Debug)]
pub struct DetConfig<T: Real> {
    pub x0: ShellVector<T>,
    /// Viscosity in front of `S^alpha`.
    pub nu: T,
    pub alpha: T,
    pub t_end: T,
    pub dt: T,
    pub output_stride: usize,
    pub scheme: DetScheme,
    /// When false the cascade term is dropped (pure diagonal flow).
    pub nonlinear: bool,
}

impl<T: Real> DetConfig<T> {
    /// Configuration with the default step from [`default_dt`], unit stride and the Euler scheme.
    pub fn new(x0: ShellVector<T>, nu: T, alpha: T, t_end: T) -> Self {
        let dt = default_dt(&x0).min(t_end);
        Self { x0, nu, alpha, t_end, dt, output_stride: 1, scheme: DetScheme::ExponentialEuler, nonlinear: true }
    }

    pub fn dim(&self) -> usize {
        self.x0.dim()
    }

    pub fn lambda(&self) -> T {
        self.x0.lambda()
    }

    /// `nu dt lambda^{2 alpha D}`; informational because the diagonal is exact.
    pub fn stability_audit(&self) -> T {
        self.nu * self.dt * self.lambda().powf(T::lit(2.0) * self.alpha * T::from_usize_lossy(self.dim()))
    }

    /// `dt lambda |x0| lambda^D`, kept below 0.1 by the default step.
    pub fn advective_cfl(&self) -> T {
        advective_number(&self.x0, self.dt)
    }

    pub fn validate(&self) -> Result<usize> {
        if !(self.dt > T::zero() && self.dt.is_finite()) {
            return Err(Error::usage(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= self.dt) {
            return Err(Error::usage(format!("horizon T = {} must be at least dt = {}", self.t_end, self.dt)));
        }
        if !(self.nu >= T::zero()) || !(self.alpha > T::zero()) {
            return Err(Error::usage("need nu >= 0 and alpha > 0"));
        }
        if self.output_stride == 0 {
            return Err(Error::usage("output stride must be at least 1"));
        }
        step_count(self.t_end, self.dt)
    }
}

pub(crate) fn advective_number<T: Real>(x0: &ShellVector<T>, dt: T) -> T {
    let lam = x0.lambda();
    dt * lam * x0.l2_norm() * lam.powi(x0.dim() as i32)
}

/// Largest step with `dt lambda |x0| lambda^D <= 0.1`; unbounded data-free runs get `1e-3`.
pub fn default_dt<T: Real>(x0: &ShellVector<T>) -> T {
    let unit = advective_number(x0, T::one());
    if unit > T::zero() {
        T::lit(0.1) / unit
    } else {
        T::lit(1e-3)
    }
}

/// Number of steps of size `dt` covering `[0, t_end]`; the ratio must be an integer up to rounding.
pub(crate) fn step_count<T: Real>(t_end: T, dt: T) -> Result<usize> {
    let ratio = (t_end / dt).to_f64_lossy();
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-6 * k.max(1.0) {
        return Err(Error::usage(format!("T / dt = {ratio} is not an integer")));
    }
    Ok(k as usize)
}

/// Reusable one-step map for a fixed `(lambda, D, nu, alpha, dt)`.
#[derive(Clone, Debug)]
pub struct DetStepper<T: Real> {
    pows: LambdaPowers<T>,
    decay: Vec<T>,
    dt: T,
    scheme: DetScheme,
    nonlinear: bool,
    b0: Vec<T>,
    b1: Vec<T>,
    y: Vec<T>,
}

impl<T: Real> DetStepper<T> {
    pub fn new(lambda: T, dim: usize, nu: T, alpha: T, dt: T, scheme: DetScheme, nonlinear: bool) -> Self {
        let decay = sobolev_weights(lambda, alpha, dim).into_iter().map(|w| (-nu * dt * w).exp()).collect();
        Self {
            pows: LambdaPowers::new(lambda, dim + 1),
            decay,
            dt,
            scheme,
            nonlinear,
            b0: vec![T::zero(); dim],
            b1: vec![T::zero(); dim],
            y: vec![T::zero(); dim],
        }
    }

    /// Advances `x` in place; on a non-finite result returns the first bad shell (1-based).
    pub fn step(&mut self, x: &mut [T]) -> std::result::Result<(), usize> {
        let dt = self.dt;
        if !self.nonlinear {
            x.iter_mut().zip(&self.decay).for_each(|(v, e)| *v = *v * *e);
            return check_finite(x);
        }
        bilinear_into(&self.pows, x, x, &mut self.b0);
        match self.scheme {
            DetScheme::ExponentialEuler => {
                for k in 0..x.len() {
                    x[k] = self.decay[k] * (x[k] + dt * self.b0[k]);
                }
            }
            DetScheme::ExponentialHeun => {
                for k in 0..x.len() {
                    self.y[k] = self.decay[k] * (x[k] + dt * self.b0[k]);
                }
                bilinear_into(&self.pows, &self.y, &self.y, &mut self.b1);
                let half = dt * T::lit(0.5);
                for k in 0..x.len() {
                    x[k] = self.decay[k] * (x[k] + half * self.b0[k]) + half * self.b1[k];
                }
            }
        }
        check_finite(x)
    }
}

fn check_finite<T: Real>(x: &[T]) -> std::result::Result<(), usize> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(k + 1),
        None => Ok(()),
    }
}

/// One step from `x`; see the module documentation for the two schemes.
pub fn step_viscous_exponential<T: Real>(
    x: &ShellVector<T>,
    dt: T,
    nu: T,
    alpha: T,
    scheme: DetScheme,
) -> Result<ShellVector<T>> {
    let mut st = DetStepper::new(x.lambda(), x.dim(), nu, alpha, dt, scheme, true);
    let mut v = x.values().to_vec();
    st.step(&mut v).map_err(|shell| Error::BlowUp { shell, step: 0, time: dt.to_f64_lossy() })?;
    Ok(ShellVector::from_parts_unchecked(v, x.lambda()))
}

/// States on a time grid with their `l2` and `H^alpha` norms.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Real> {
    pub times: Vec<T>,
    pub states: Vec<ShellVector<T>>,
    pub l2_norm: Vec<T>,
    pub h_alpha_norm: Vec<T>,
    pub alpha: T,
}

impl<T: Real> Trajectory<T> {
    pub(crate) fn with_capacity(alpha: T, n: usize) -> Self {
        Self {
            times: Vec::with_capacity(n),
            states: Vec::with_capacity(n),
            l2_norm: Vec::with_capacity(n),
            h_alpha_norm: Vec::with_capacity(n),
            alpha,
        }
    }

    pub(crate) fn push(&mut self, t: T, state: &[T], lambda: T, weights: &[T]) {
        self.times.push(t);
        self.l2_norm.push(l2_norm_sq(state).sqrt());
        self.h_alpha_norm.push(weighted_norm_sq(state, weights).sqrt());
        self.states.push(ShellVector::from_parts_unchecked(state.to_vec(), lambda));
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.dim())
    }

    pub fn lambda(&self) -> Option<T> {
        self.states.first().map(|s| s.lambda())
    }

    pub fn last(&self) -> Option<&ShellVector<T>> {
        self.states.last()
    }
}

pub fn solve_deterministic<T: Real>(cfg: &DetConfig<T>) -> Result<Trajectory<T>> {
    let steps = cfg.validate()?;
    let lambda = cfg.lambda();
    let weights = sobolev_weights(lambda, cfg.alpha, cfg.dim());
    let mut st = DetStepper::new(lambda, cfg.dim(), cfg.nu, cfg.alpha, cfg.dt, cfg.scheme, cfg.nonlinear);
    let mut x = cfg.x0.values().to_vec();
    let mut traj = Trajectory::with_capacity(cfg.alpha, steps / cfg.output_stride + 2);
    traj.push(T::zero(), &x, lambda, &weights);
    for k in 1..=steps {
        let t = T::from_usize_lossy(k) * cfg.dt;
        st.step(&mut x).map_err(|shell| Error::BlowUp { shell, step: k, time: t.to_f64_lossy() })?;
        if k % cfg.output_stride == 0 || k == steps {
            traj.push(t, &x, lambda, &weights);
        }
    }
    Ok(traj)
}

/// Energy residuals `r = |X(b)|^2 + 2 nu int_a^b |X|^2_{H^alpha} - |X(a)|^2` (trapezoid rule).
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyResidual<T: Real> {
    /// `r(t_k, t_{k+1})` for consecutive grid points.
    pub per_interval: Vec<T>,
    /// `r(t_0, t_{k+1})`.
    pub cumulative: Vec<T>,
}

impl<T: Real> EnergyResidual<T> {
    /// `r(t_0, T)`, zero for a single-point trajectory.
    pub fn total(&self) -> T {
        self.cumulative.last().copied().unwrap_or_else(T::zero)
    }
}

pub fn energy_equality_residual<T: Real>(traj: &Trajectory<T>, nu: T, alpha: T) -> EnergyResidual<T> {
    let Some(lambda) = traj.lambda() else {
        return EnergyResidual { per_interval: vec![], cumulative: vec![] };
    };
    let weights = sobolev_weights(lambda, alpha, traj.dim());
    let e: Vec<T> = traj.states.iter().map(|s| l2_norm_sq(s.values())).collect();
    let h: Vec<T> = traj.states.iter().map(|s| weighted_norm_sq(s.values(), &weights)).collect();
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let mut per_interval = Vec::with_capacity(e.len().saturating_sub(1));
    let mut cumulative = Vec::with_capacity(e.len().saturating_sub(1));
    let mut integral = CompensatedSum::new();
    for k in 0..e.len().saturating_sub(1) {
        let dt = traj.times[k + 1] - traj.times[k];
        let piece = half * dt * (h[k] + h[k + 1]);
        integral.add(piece);
        per_interval.push(e[k + 1] + two * nu * piece - e[k]);
        cumulative.push(e[k + 1] + two * nu * integral.value() - e[0]);
    }
    EnergyResidual { per_interval, cumulative }
}

/// For each shell, the largest deviation over the grid between `X_n(t) - X_n(0)` and the
/// trapezoid integral of the right-hand side `B(X)_n - nu lambda^{2 alpha n} X_n`.
pub fn integrated_component_residual<T: Real>(traj: &Trajectory<T>, nu: T, alpha: T) -> Vec<T> {
    let Some(lambda) = traj.lambda() else { return vec![] };
    let d = traj.dim();
    let pows = LambdaPowers::new(lambda, d + 1);
    let weights = sobolev_weights(lambda, alpha, d);
    let rhs: Vec<Vec<T>> = traj
        .states
        .iter()
        .map(|s| {
            let mut b = vec![T::zero(); d];
            bilinear_into(&pows, s.values(), s.values(), &mut b);
            b.iter().zip(s.values()).zip(&weights).map(|((bn, xn), w)| *bn - nu * *w * *xn).collect()
        })
        .collect();
    let mut worst = vec![T::zero(); d];
    let mut integral = vec![CompensatedSum::new(); d];
    let half = T::lit(0.5);
    for k in 0..traj.len().saturating_sub(1) {
        let dt = traj.times[k + 1] - traj.times[k];
        for n in 0..d {
            integral[n].add(half * dt * (rhs[k][n] + rhs[k + 1][n]));
            let dev = traj.states[k + 1].values()[n] - traj.states[0].values()[n] - integral[n].value();
            worst[n] = worst[n].max(dev.abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rest_state_is_fixed() {
        let z = ShellVector::<f64>::zeros(6, 2.0).unwrap();
        for scheme in [DetScheme::ExponentialEuler, DetScheme::ExponentialHeun] {
            assert_eq!(step_viscous_exponential(&z, 0.1, 1.0, 1.0, scheme).unwrap(), z);
        }
        let mut cfg = DetConfig::new(z, 1.0, 1.0, 0.1);
        cfg.dt = 0.01;
        let traj = solve_deterministic(&cfg).unwrap();
        assert!(traj.states.iter().all(|s| s.l2_norm() == 0.0));
        assert!(energy_equality_residual(&traj, 1.0, 1.0).cumulative.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn linear_step_is_exact_decay() {
        let e1 = ShellVector::<f64>::basis(1, 4, 2.0).unwrap();
        let mut cfg = DetConfig::new(e1, 1.0, 1.0, 0.1);
        cfg.dt = 0.1;
        cfg.nonlinear = false;
        let traj = solve_deterministic(&cfg).unwrap();
        assert_relative_eq!(traj.states[1].values()[0], (-0.4f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn inviscid_production_rate() {
        let e1 = ShellVector::<f64>::basis(1, 4, 2.0).unwrap();
        let dt = 1e-7;
        let x = step_viscous_exponential(&e1, dt, 0.0, 1.0, DetScheme::ExponentialEuler).unwrap();
        assert_relative_eq!(x.values()[1] / dt, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn blow_up_reports_shell_and_time() {
        let x = ShellVector::new(vec![1e200, 1e200, 0.0], 2.0).unwrap();
        match step_viscous_exponential(&x, 1.0, 0.0, 1.0, DetScheme::ExponentialEuler) {
            Err(Error::BlowUp { shell, time, .. }) => {
                assert_eq!(shell, 1);
                assert_eq!(time, 1.0);
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let e1 = ShellVector::<f64>::basis(1, 4, 2.0).unwrap();
        let mut cfg = DetConfig::new(e1, 1.0, 1.0, 1.0);
        cfg.dt = 0.3;
        assert!(matches!(solve_deterministic(&cfg), Err(Error::Usage(_))));
        cfg.dt = 2.0;
        assert!(matches!(solve_deterministic(&cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn default_dt_meets_cfl() {
        let x = ShellVector::new(vec![0.5, 0.5, 0.0, 0.0], 2.0).unwrap();
        let cfg = DetConfig::new(x, 1.0, 1.0, 1.0);
        assert!(cfg.advective_cfl() <= 0.1 + 1e-15);
    }

    #[test]
    fn output_stride_keeps_endpoints() {
        let x = ShellVector::new(vec![0.5, 0.3, 0.0, 0.0], 2.0).unwrap();
        let mut cfg = DetConfig::new(x, 1.0, 1.0, 0.1);
        cfg.dt = 0.001;
        cfg.output_stride = 30;
        let traj = solve_deterministic(&cfg).unwrap();
        assert_eq!(traj.len(), 5);
        assert_relative_eq!(*traj.times.last().unwrap(), 0.1, max_relative = 1e-12);
    }
}
