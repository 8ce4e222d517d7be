//! Change of measure between the linear and the nonlinear model.
//!
//! Shifting the nearest-neighbour Brownian motions by `h_i = X_i / (sqrt(2 nu) theta_1)`
//! turns the noise along `A_{i,i+1}` into the cascade drift `B(X)`. Along a path
//!
//! ```text
//! L_t    = sign * (1 / (sqrt(2 nu) theta_1)) sum_{i<D} int X_i dW_{i,1}
//! [L,L]_t = (1 / (2 nu theta_1^2)) int sum_{i<D} X_i^2 dt
//! G_t    = exp(L_t - [L,L]_t / 2)
//! ```
//!
//! With left-point sums over the increments the scheme consumed, `G` is the exact
//! likelihood ratio of the discrete Gaussian increments.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::BrownianDriver;
use crate::scalar::{CompensatedSum, Real};
use crate::stochastic::{Model, SdeConfig, SdeStepper, StochPath};

/// Which measure the density converts to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Weights linear paths so they carry the law of the nonlinear model (`sign = +1`).
    LinearToNonlinear,
    /// Weights nonlinear paths so they carry the law of the linear model (`sign = -1`).
    NonlinearToLinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityPath<T: Real> {
    pub times: Vec<T>,
    pub l: Vec<T>,
    pub qv: Vec<T>,
    pub log_g: Vec<T>,
}

impl<T: Real> DensityPath<T> {
    pub fn g(&self) -> Vec<T> {
        self.log_g.iter().map(|v| v.exp()).collect()
    }

    pub fn final_log_g(&self) -> Option<T> {
        self.log_g.last().copied()
    }
}

/// Running `L`, `[L,L]` fed one step at a time.
#[derive(Clone, Debug)]
pub struct DensityAccumulator<T: Real> {
    scale: T,
    qv_scale: T,
    l: CompensatedSum<T>,
    qv: CompensatedSum<T>,
}

impl<T: Real> DensityAccumulator<T> {
    pub fn new(nu: T, theta1: T, direction: Direction) -> Result<Self> {
        if theta1 == T::zero() || !theta1.is_finite() {
            return Err(Error::usage(
                "change of measure needs theta_1 != 0 (the nearest-neighbour noise must act on every shell)",
            ));
        }
        if !(nu > T::zero()) {
            return Err(Error::usage(format!("change of measure needs nu > 0, got {nu}")));
        }
        let base = T::one() / ((T::lit(2.0) * nu).sqrt() * theta1);
        let scale = match direction {
            Direction::LinearToNonlinear => base,
            Direction::NonlinearToLinear => -base,
        };
        Ok(Self { scale, qv_scale: base * base, l: CompensatedSum::new(), qv: CompensatedSum::new() })
    }

    /// Adds step `[t_k, t_k + dt]` given the left state `x` and `dw(i) = Delta W_{i,1}`.
    pub fn push(&mut self, x: &[T], dt: T, dw: impl Fn(usize) -> f64) {
        let d = x.len();
        let mut inc = CompensatedSum::new();
        let mut sq = CompensatedSum::new();
        for i in (1..d).rev() {
            let xi = x[i - 1];
            inc.add(xi * T::lit(dw(i)));
            sq.add(xi * xi);
        }
        self.l.add(self.scale * inc.value());
        self.qv.add(self.qv_scale * sq.value() * dt);
    }

    pub fn l(&self) -> T {
        self.l.value()
    }

    pub fn qv(&self) -> T {
        self.qv.value()
    }

    pub fn log_g(&self) -> T {
        self.l() - T::lit(0.5) * self.qv()
    }
}

/// Density along a path recorded at every step, re-reading the increments from `driver`.
pub fn density_path<T: Real>(
    path: &StochPath<T>,
    driver: &BrownianDriver,
    trajectory: u64,
    nu: T,
    theta1: T,
    direction: Direction,
) -> Result<DensityPath<T>> {
    let mut acc = DensityAccumulator::new(nu, theta1, direction)?;
    let steps = path.times.len().saturating_sub(1);
    if steps > driver.step_count() {
        return Err(Error::usage(format!("path has {steps} steps, driver {}", driver.step_count())));
    }
    let d = path.states.first().map_or(0, |s| s.dim());
    if d > driver.index_bounds().0 + 1 {
        return Err(Error::usage("driver does not reach the nearest-neighbour pairs of every shell"));
    }
    let dt = T::lit(driver.dt());
    for w in path.times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > T::lit(1e-9) * dt {
            return Err(Error::usage("density needs a path recorded at every step"));
        }
    }
    let mut out = DensityPath {
        times: path.times.clone(),
        l: Vec::with_capacity(steps + 1),
        qv: Vec::with_capacity(steps + 1),
        log_g: Vec::with_capacity(steps + 1),
    };
    out.l.push(T::zero());
    out.qv.push(T::zero());
    out.log_g.push(T::zero());
    let mut col = vec![0.0; d];
    for k in 0..steps {
        for (i, c) in col.iter_mut().enumerate().take(d).skip(1) {
            *c = driver.increment(trajectory, k, i, 1)?;
        }
        acc.push(path.states[k].values(), dt, |i| col[i]);
        out.l.push(acc.l());
        out.qv.push(acc.qv());
        out.log_g.push(acc.log_g());
    }
    Ok(out)
}

/// Simulates one path and accumulates its density online; both are recorded every `stride` steps.
pub fn simulate_with_density<T: Real>(
    cfg: &SdeConfig<T>,
    trajectory: u64,
    direction: Direction,
) -> Result<(StochPath<T>, DensityPath<T>)> {
    if matches!(cfg.model, Model::Fluctuation | Model::ConvolutionOnly) {
        return Err(Error::usage("density needs the linear or nonlinear model"));
    }
    let steps = cfg.validate()?;
    let mut acc = DensityAccumulator::new(cfg.nu, cfg.theta.get(1), direction)?;
    let mut st = SdeStepper::new(cfg, trajectory)?;
    let stride = cfg.output_stride;
    let mut x = cfg.x0.values().to_vec();
    let mut prev = x.clone();
    let mut times = vec![T::zero()];
    let mut states = vec![cfg.x0.clone()];
    let mut dens = DensityPath { times: vec![T::zero()], l: vec![T::zero()], qv: vec![T::zero()], log_g: vec![T::zero()] };
    for k in 0..steps {
        prev.copy_from_slice(&x);
        st.step(k, &mut x)?;
        acc.push(&prev, cfg.dt, |i| st.last_increment(i, 1));
        if (k + 1) % stride == 0 || k + 1 == steps {
            let t = T::from_usize_lossy(k + 1) * cfg.dt;
            times.push(t);
            states.push(crate::sequence_space::ShellVector::new(x.clone(), cfg.lambda())?);
            dens.times.push(t);
            dens.l.push(acc.l());
            dens.qv.push(acc.qv());
            dens.log_g.push(acc.log_g());
        }
    }
    let l2_norm = states.iter().map(|s| s.l2_norm()).collect();
    let mut path = StochPath { times, states, l2_norm, diagnostics: crate::stochastic::PathDiagnostics {
        trajectory,
        seed: cfg.driver.master_seed(),
        model: cfg.model,
        scheme: cfg.scheme,
        corrector: cfg.corrector,
        norm_excess: 0.0,
        warnings: vec![],
    } };
    let x0n = cfg.x0.l2_norm();
    path.diagnostics.norm_excess =
        path.l2_norm.iter().fold(T::zero(), |m, v| m.max(*v - x0n)).to_f64_lossy();
    Ok((path, dens))
}

/// `exp(|x|^2 T / (4 nu theta_1^2))`, a bound on `E exp([L,L]_T / 2)`.
pub fn novikov_bound<T: Real>(x_norm: T, t: T, nu: T, theta1: T) -> Result<T> {
    Ok(novikov_exponent(x_norm, t, nu, theta1)?.exp())
}

pub fn novikov_exponent<T: Real>(x_norm: T, t: T, nu: T, theta1: T) -> Result<T> {
    if theta1 == T::zero() {
        return Err(Error::usage("Novikov bound needs theta_1 != 0"));
    }
    Ok(x_norm * x_norm * t / (T::lit(4.0) * nu * theta1 * theta1))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReweightedEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub effective_sample_size: f64,
    pub samples: usize,
    pub warning: Option<String>,
}

/// Effective sample size below which the estimate carries a degeneracy warning.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 10.0;

/// Self-normalized importance-sampling mean of `values` under weights `exp(log_weights)`,
/// with delta-method standard error.
pub fn reweighted_expectation<T: Real>(values: &[T], log_weights: &[T]) -> Result<ReweightedEstimate> {
    if values.len() != log_weights.len() || values.is_empty() {
        return Err(Error::usage("values and weights must be nonempty and of equal length"));
    }
    let lw: Vec<f64> = log_weights.iter().map(|v| v.to_f64_lossy()).collect();
    if let Some(k) = lw.iter().position(|v| !v.is_finite()) {
        return Err(Error::usage(format!("log-weight {k} is not finite")));
    }
    let top = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|v| (v - top).exp()).collect();
    let f: Vec<f64> = values.iter().map(|v| v.to_f64_lossy()).collect();
    let (mut sw, mut sw2, mut swf) = (CompensatedSum::new(), CompensatedSum::new(), CompensatedSum::new());
    for (wi, fi) in w.iter().zip(&f) {
        sw.add(*wi);
        sw2.add(wi * wi);
        swf.add(wi * fi);
    }
    let (sw, sw2) = (sw.value(), sw2.value());
    let estimate = swf.value() / sw;
    let mut dev = CompensatedSum::new();
    for (wi, fi) in w.iter().zip(&f) {
        dev.add((wi * (fi - estimate)).powi(2));
    }
    let standard_error = dev.value().sqrt() / sw;
    let ess = sw * sw / sw2;
    let warning = (ess < MIN_EFFECTIVE_SAMPLES)
        .then(|| format!("weights degenerate: effective sample size {ess:.2} below {MIN_EFFECTIVE_SAMPLES}"));
    Ok(ReweightedEstimate { estimate, standard_error, effective_sample_size: ess, samples: f.len(), warning })
}

/// Final `log G_T` and `f(X_T)` over trajectories `0..count`, index-ordered.
pub fn ensemble_log_weights<T: Real>(
    cfg: &SdeConfig<T>,
    count: u64,
    direction: Direction,
    f: impl Fn(&StochPath<T>) -> T + Sync,
) -> Result<(Vec<T>, Vec<T>)> {
    let pairs: Result<Vec<(T, T)>> = (0..count)
        .into_par_iter()
        .map(|tr| {
            let (p, d) = simulate_with_density(cfg, tr, direction)?;
            Ok((d.final_log_g().unwrap_or(T::zero()), f(&p)))
        })
        .collect();
    Ok(pairs?.into_iter().unzip())
}
