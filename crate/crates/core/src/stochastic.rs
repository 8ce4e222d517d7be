//! Time steppers for the stochastic dyadic systems truncated at `D` shells.
//!
//! Noise acts through the rotation generators `A_{i,i+j}` with coefficient
//! `c_{ij} = sqrt(2 nu) lambda^i theta_j`, for pairs with `i + j <= D`.
//!
//! ```text
//! Ito exponential:  y = x + dt B(x) + sum_{ij} c_ij A_{i,i+j} x dW_ij
//!                   x' = exp(dt (nu S_theta + kappa S)) y
//! Rotation split:   y = exp(dt kappa S)(x + dt B(x))
//!                   x' = prod_{(i,j) lexicographic} exp(c_ij dW_ij A_{i,i+j}) y
//! ```
//!
//! The Ito corrector `S_theta` is either the closed form of the untruncated
//! system or the corrector of the truncated system; the second makes the Ito
//! scheme consistent with the energy-conserving rotation split.

use serde::{Deserialize, Serialize};

use crate::deterministic::{advective_number, step_count};
use crate::error::{Error, Result};
use crate::noise::{pair_index, BrownianDriver, ThetaFamily};
use crate::scalar::Real;
use crate::sequence_space::{
    bilinear_into, build_corrector_s_theta, l2_norm_sq, sobolev_weights, weighted_norm_sq, LambdaPowers,
    ShellVector,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Nonlinear,
    NonlinearViscous,
    LinearGirsanov,
    Fluctuation,
    ConvolutionOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ItoExponential,
    StratonovichRotationSplit,
}

/// Which Ito corrector the exponential scheme integrates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectorForm {
    /// Closed form of the untruncated system; truncated noise then loses energy at the top shells.
    Full,
    /// Exact corrector of the system truncated at `D`.
    Galerkin,
}

#[derive(Clone, Debug)]
pub struct SdeConfig<T: Real> {
    pub x0: ShellVector<T>,
    pub nu: T,
    pub kappa: T,
    pub theta: ThetaFamily<T>,
    pub t_end: T,
    pub dt: T,
    pub driver: BrownianDriver,
    pub model: Model,
    pub scheme: Scheme,
    pub corrector: CorrectorForm,
    pub output_stride: usize,
    /// Abort when `|X| > blowup_factor |x0|`.
    pub blowup_factor: T,
}

impl<T: Real> SdeConfig<T> {
    /// Configuration whose driver matches the step grid, with Galerkin index bounds.
    pub fn new(
        x0: ShellVector<T>,
        nu: T,
        theta: ThetaFamily<T>,
        t_end: T,
        dt: T,
        seed: u64,
        trajectories: u64,
    ) -> Result<Self> {
        let steps = step_count(t_end, dt)?;
        let driver = BrownianDriver::galerkin(seed, dt.to_f64_lossy(), steps, x0.dim(), trajectories)?;
        Ok(Self {
            x0,
            nu,
            kappa: T::zero(),
            theta,
            t_end,
            dt,
            driver,
            model: Model::Nonlinear,
            scheme: Scheme::ItoExponential,
            corrector: CorrectorForm::Full,
            output_stride: 1,
            blowup_factor: T::lit(2.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.x0.dim()
    }

    pub fn lambda(&self) -> T {
        self.x0.lambda()
    }

    pub fn steps(&self) -> Result<usize> {
        step_count(self.t_end, self.dt)
    }

    pub fn validate(&self) -> Result<usize> {
        if !(self.dt > T::zero()) {
            return Err(Error::usage(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= self.dt) {
            return Err(Error::usage("horizon must be at least one step"));
        }
        if !(self.nu >= T::zero()) || !(self.kappa >= T::zero()) {
            return Err(Error::usage("need nu >= 0 and kappa >= 0"));
        }
        if self.output_stride == 0 {
            return Err(Error::usage("output stride must be at least 1"));
        }
        if self.dim() < 2 {
            return Err(Error::usage("stochastic models need D >= 2"));
        }
        let steps = self.steps()?;
        let ddt = self.driver.dt();
        if (ddt - self.dt.to_f64_lossy()).abs() > 1e-12 * ddt {
            return Err(Error::usage(format!("driver step {ddt} differs from dt {}", self.dt)));
        }
        if self.driver.step_count() < steps {
            return Err(Error::usage(format!("driver covers {} steps, run needs {steps}", self.driver.step_count())));
        }
        let needs_normalized = matches!(self.model, Model::Nonlinear)
            || (self.scheme == Scheme::ItoExponential
                && self.corrector == CorrectorForm::Full
                && matches!(self.model, Model::NonlinearViscous | Model::LinearGirsanov));
        if needs_normalized && !self.theta.is_normalized() {
            return Err(Error::usage(format!("model needs |theta|_l2 = 1, got {}", self.theta.l2())));
        }
        Ok(steps)
    }

    /// `(advective, noise)` numbers; the default step keeps both at or below 0.1.
    pub fn cfl_audit(&self) -> (T, T) {
        let adv = advective_number(&self.x0, self.dt);
        let noise = (T::lit(2.0) * self.nu).sqrt()
            * self.lambda().powi(self.dim() as i32)
            * self.theta.linf()
            * self.dt.sqrt();
        (adv, noise)
    }
}

/// Largest step meeting both the advective and the noise CFL numbers.
pub fn default_sde_dt<T: Real>(x0: &ShellVector<T>, nu: T, theta: &ThetaFamily<T>) -> T {
    let adv = crate::deterministic::default_dt(x0);
    let c = (T::lit(2.0) * nu).sqrt() * x0.lambda().powi(x0.dim() as i32) * theta.linf();
    if c > T::zero() {
        adv.min((T::lit(0.1) / c).powi(2))
    } else {
        adv
    }
}

#[derive(Clone, Copy, Debug)]
struct Pair<T> {
    i0: usize,
    k0: usize,
    j: usize,
    idx: usize,
    coef: T,
}

/// Active noise pairs in lexicographic `(i, j)` order.
fn noise_pairs<T: Real>(theta: &ThetaFamily<T>, nu: T, lambda: T, dim: usize, driver: &BrownianDriver) -> Vec<Pair<T>> {
    let (i_max, j_max) = driver.index_bounds();
    let s = (T::lit(2.0) * nu).sqrt();
    let mut pairs = Vec::new();
    for i in 1..dim.min(i_max + 1) {
        for j in 1..=(dim - i).min(j_max) {
            let th = theta.get(j);
            if th == T::zero() {
                continue;
            }
            pairs.push(Pair { i0: i - 1, k0: i + j - 1, j, idx: pair_index(i, j), coef: s * lambda.powi(i as i32) * th });
        }
    }
    pairs
}

/// Reusable one-step map for a validated configuration.
#[derive(Clone, Debug)]
pub struct SdeStepper<T: Real> {
    model: Model,
    scheme: Scheme,
    pows: LambdaPowers<T>,
    pairs: Vec<Pair<T>>,
    max_sum: usize,
    decay: Vec<T>,
    dt: T,
    trajectory: u64,
    noise: Vec<f64>,
    b: Vec<T>,
    b2: Vec<T>,
    y: Vec<T>,
    driver: BrownianDriver,
}

impl<T: Real> SdeStepper<T> {
    pub fn new(cfg: &SdeConfig<T>, trajectory: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim();
        let lambda = cfg.lambda();
        let pairs = noise_pairs(&cfg.theta, cfg.nu, lambda, d, &cfg.driver);
        let max_sum = pairs.iter().map(|p| p.k0 + 1).max().unwrap_or(2);
        let s_diag: Vec<T> = (1..=d).map(|n| -lambda.powi(2 * n as i32)).collect();
        let rates: Vec<T> = match (cfg.model, cfg.scheme) {
            (Model::Fluctuation | Model::ConvolutionOnly, _) => s_diag.iter().map(|s| cfg.nu * *s).collect(),
            (_, Scheme::StratonovichRotationSplit) => s_diag.iter().map(|s| cfg.kappa * *s).collect(),
            (model, Scheme::ItoExponential) => {
                let galerkin = match cfg.corrector {
                    CorrectorForm::Full => None,
                    CorrectorForm::Galerkin => Some(d),
                };
                let corr = build_corrector_s_theta(&cfg.theta, lambda, d, galerkin)?;
                let kappa = if model == Model::NonlinearViscous { cfg.kappa } else { T::zero() };
                corr.entries().iter().zip(&s_diag).map(|(c, s)| cfg.nu * *c + kappa * *s).collect()
            }
        };
        let decay = rates.iter().map(|r| (cfg.dt * *r).exp()).collect();
        if trajectory >= cfg.driver.trajectories() {
            return Err(Error::index(format!("trajectory {trajectory} outside driver range")));
        }
        Ok(Self {
            model: cfg.model,
            scheme: cfg.scheme,
            pows: LambdaPowers::new(lambda, d + 1),
            pairs,
            max_sum,
            decay,
            dt: cfg.dt,
            trajectory,
            noise: Vec::new(),
            b: vec![T::zero(); d],
            b2: vec![T::zero(); d],
            y: vec![T::zero(); d],
            driver: cfg.driver.clone(),
        })
    }

    fn draw(&mut self, step: usize) -> Result<()> {
        if self.pairs.is_empty() {
            self.noise.clear();
            return Ok(());
        }
        self.driver.fill_triangle(self.trajectory, step, self.max_sum, &mut self.noise)
    }

    /// Increments consumed by the last step, in `pair_index` order.
    pub fn last_increments(&self) -> &[f64] {
        &self.noise
    }

    /// Increment `Delta W_{i,j}` of the last step, zero for inactive pairs.
    pub fn last_increment(&self, i: usize, j: usize) -> f64 {
        self.noise.get(pair_index(i, j)).copied().unwrap_or(0.0)
    }

    /// Ito noise term `sum c_ij A_{i,i+j} x dW_ij` of the last step, added into `out`.
    pub fn add_noise_term(&self, x: &[T], out: &mut [T]) {
        for p in &self.pairs {
            let dw = T::lit(self.noise[p.idx]);
            let c = p.coef * dw;
            out[p.i0] = out[p.i0] - c * x[p.k0];
            out[p.k0] = out[p.k0] + c * x[p.i0];
        }
    }

    /// Advances the state of the nonlinear, viscous or linear model by step `step`.
    pub fn step(&mut self, step: usize, x: &mut [T]) -> Result<()> {
        self.draw(step)?;
        let nonlinear = matches!(self.model, Model::Nonlinear | Model::NonlinearViscous);
        match self.scheme {
            Scheme::ItoExponential => {
                self.y.copy_from_slice(x);
                if nonlinear {
                    bilinear_into(&self.pows, x, x, &mut self.b);
                    for k in 0..x.len() {
                        self.y[k] = self.y[k] + self.dt * self.b[k];
                    }
                }
                let mut y = std::mem::take(&mut self.y);
                self.add_noise_term(x, &mut y);
                for k in 0..x.len() {
                    x[k] = self.decay[k] * y[k];
                }
                self.y = y;
            }
            Scheme::StratonovichRotationSplit => {
                if nonlinear {
                    bilinear_into(&self.pows, x, x, &mut self.b);
                    for k in 0..x.len() {
                        x[k] = self.decay[k] * (x[k] + self.dt * self.b[k]);
                    }
                }
                for p in &self.pairs {
                    let phi = p.coef * T::lit(self.noise[p.idx]);
                    let (s, c) = phi.sin_cos();
                    let (a, b) = (x[p.i0], x[p.k0]);
                    x[p.i0] = a * c - b * s;
                    x[p.k0] = a * s + b * c;
                }
            }
        }
        finite_or_blowup(x, step, self.dt)
    }

    /// Fluctuation step: `xi' = E(xi + dt (B(xi, xt) + B(xt, xi)) + noise(xt))`.
    pub fn step_fluctuation(&mut self, step: usize, xi: &mut [T], xt: &[T]) -> Result<()> {
        self.draw(step)?;
        bilinear_into(&self.pows, xi, xt, &mut self.b);
        bilinear_into(&self.pows, xt, xi, &mut self.b2);
        for k in 0..xi.len() {
            self.y[k] = xi[k] + self.dt * (self.b[k] + self.b2[k]);
        }
        let mut y = std::mem::take(&mut self.y);
        self.add_noise_term(xt, &mut y);
        for k in 0..xi.len() {
            xi[k] = self.decay[k] * y[k];
        }
        self.y = y;
        finite_or_blowup(xi, step, self.dt)
    }

    /// Convolution step: `z' = E(z + noise(x))`.
    pub fn step_convolution(&mut self, step: usize, z: &mut [T], x: &[T]) -> Result<()> {
        self.draw(step)?;
        self.add_noise_term(x, z);
        for k in 0..z.len() {
            z[k] = self.decay[k] * z[k];
        }
        finite_or_blowup(z, step, self.dt)
    }

    /// `(i, j)` pairs with nonzero coefficient, lexicographic.
    pub fn active_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().map(|p| (p.i0 + 1, p.j))
    }
}

fn finite_or_blowup<T: Real>(x: &[T], step: usize, dt: T) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(Error::BlowUp {
            shell: k + 1,
            step: step + 1,
            time: (T::from_usize_lossy(step + 1) * dt).to_f64_lossy(),
        }),
        None => Ok(()),
    }
}

/// Diagnostics recorded along a stochastic path.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathDiagnostics {
    pub trajectory: u64,
    pub seed: u64,
    pub model: Model,
    pub scheme: Scheme,
    pub corrector: CorrectorForm,
    /// `max_t |X(t)| - |x0|` over the output grid.
    pub norm_excess: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StochPath<T: Real> {
    pub times: Vec<T>,
    pub states: Vec<ShellVector<T>>,
    pub l2_norm: Vec<T>,
    pub diagnostics: PathDiagnostics,
}

impl<T: Real> StochPath<T> {
    fn new(cfg: &SdeConfig<T>, trajectory: u64, capacity: usize) -> Self {
        Self {
            times: Vec::with_capacity(capacity),
            states: Vec::with_capacity(capacity),
            l2_norm: Vec::with_capacity(capacity),
            diagnostics: PathDiagnostics {
                trajectory,
                seed: cfg.driver.master_seed(),
                model: cfg.model,
                scheme: cfg.scheme,
                corrector: cfg.corrector,
                norm_excess: 0.0,
                warnings: vec![],
            },
        }
    }

    fn push(&mut self, t: T, x: &[T], lambda: T) {
        self.times.push(t);
        self.l2_norm.push(l2_norm_sq(x).sqrt());
        self.states.push(ShellVector::from_parts_unchecked(x.to_vec(), lambda));
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&ShellVector<T>> {
        self.states.last()
    }

    /// `|X(t)|_{H^s}` along the grid.
    pub fn hs_norms(&self, s: T) -> Vec<T> {
        let Some(first) = self.states.first() else { return vec![] };
        let w = sobolev_weights(first.lambda(), s, first.dim());
        self.states.iter().map(|x| weighted_norm_sq(x.values(), &w).sqrt()).collect()
    }
}

fn records(k: usize, steps: usize, stride: usize) -> bool {
    k % stride == 0 || k == steps
}

/// Runs the nonlinear, viscous or linear model for one trajectory.
pub fn simulate<T: Real>(cfg: &SdeConfig<T>, trajectory: u64) -> Result<StochPath<T>> {
    if matches!(cfg.model, Model::Fluctuation | Model::ConvolutionOnly) {
        return Err(Error::usage("fluctuation and convolution models need an attached path"));
    }
    let steps = cfg.validate()?;
    let mut st = SdeStepper::new(cfg, trajectory)?;
    let lambda = cfg.lambda();
    let mut x = cfg.x0.values().to_vec();
    let x0_norm = cfg.x0.l2_norm();
    let limit = cfg.blowup_factor * x0_norm;
    let mut path = StochPath::new(cfg, trajectory, steps / cfg.output_stride + 2);
    path.push(T::zero(), &x, lambda);
    let mut excess = T::zero();
    for k in 0..steps {
        st.step(k, &mut x)?;
        let norm = l2_norm_sq(&x).sqrt();
        if norm > limit && x0_norm > T::zero() {
            let shell = argmax_abs(&x);
            return Err(Error::BlowUp { shell, step: k + 1, time: (T::from_usize_lossy(k + 1) * cfg.dt).to_f64_lossy() });
        }
        if records(k + 1, steps, cfg.output_stride) {
            excess = excess.max(norm - x0_norm);
            path.push(T::from_usize_lossy(k + 1) * cfg.dt, &x, lambda);
        }
    }
    path.diagnostics.norm_excess = excess.to_f64_lossy();
    let tol = T::lit(1e-10) * x0_norm.max(T::min_positive_value());
    if excess > tol {
        path.diagnostics.warnings.push(format!(
            "norm bound |X(t)| <= |x0| exceeded by {:e} (scheme tolerance)",
            excess.to_f64_lossy()
        ));
    }
    Ok(path)
}

fn argmax_abs<T: Real>(x: &[T]) -> usize {
    let mut best = 0;
    for k in 1..x.len() {
        if x[k].abs() > x[best].abs() {
            best = k;
        }
    }
    best + 1
}

fn check_attached<T: Real>(cfg: &SdeConfig<T>, steps: usize, path: &[ShellVector<T>]) -> Result<()> {
    if path.len() != steps + 1 {
        return Err(Error::usage(format!(
            "attached path has {} points, the step grid needs {}",
            path.len(),
            steps + 1
        )));
    }
    if path.iter().any(|s| s.dim() != cfg.dim() || s.lambda() != cfg.lambda()) {
        return Err(Error::usage("attached path does not match (D, lambda)"));
    }
    Ok(())
}

/// Fluctuation field `xi` driven by the deterministic path `xt` (one state per step,
/// `xi(0) = 0`). `cfg.theta` carries the unnormalized weights `j^{-alpha1}`.
pub fn simulate_fluctuation<T: Real>(cfg: &SdeConfig<T>, xt: &[ShellVector<T>], trajectory: u64) -> Result<StochPath<T>> {
    if cfg.model != Model::Fluctuation {
        return Err(Error::usage("simulate_fluctuation needs model = fluctuation"));
    }
    let steps = cfg.validate()?;
    check_attached(cfg, steps, xt)?;
    let mut st = SdeStepper::new(cfg, trajectory)?;
    let lambda = cfg.lambda();
    let mut xi = vec![T::zero(); cfg.dim()];
    let mut path = StochPath::new(cfg, trajectory, steps / cfg.output_stride + 2);
    path.push(T::zero(), &xi, lambda);
    for k in 0..steps {
        st.step_fluctuation(k, &mut xi, xt[k].values())?;
        if records(k + 1, steps, cfg.output_stride) {
            path.push(T::from_usize_lossy(k + 1) * cfg.dt, &xi, lambda);
        }
    }
    Ok(path)
}

/// Discrete stochastic convolution `Z_{k+1} = e^{nu dt S}(Z_k + noise(X_k))`, `Z_0 = 0`.
pub fn stochastic_convolution_path<T: Real>(
    cfg: &SdeConfig<T>,
    source: &[ShellVector<T>],
    trajectory: u64,
) -> Result<StochPath<T>> {
    if cfg.model != Model::ConvolutionOnly {
        return Err(Error::usage("stochastic_convolution_path needs model = convolution_only"));
    }
    let steps = cfg.validate()?;
    check_attached(cfg, steps, source)?;
    let mut st = SdeStepper::new(cfg, trajectory)?;
    let lambda = cfg.lambda();
    let mut z = vec![T::zero(); cfg.dim()];
    let mut path = StochPath::new(cfg, trajectory, steps / cfg.output_stride + 2);
    path.push(T::zero(), &z, lambda);
    for k in 0..steps {
        st.step_convolution(k, &mut z, source[k].values())?;
        if records(k + 1, steps, cfg.output_stride) {
            path.push(T::from_usize_lossy(k + 1) * cfg.dt, &z, lambda);
        }
    }
    Ok(path)
}

/// Result of the fixed-point solve of the mild fluctuation equation.
#[derive(Clone, Debug)]
pub struct PicardSolution<T: Real> {
    pub states: Vec<ShellVector<T>>,
    /// Largest iteration count over all time windows.
    pub iterations: usize,
    /// Final successive-iterate distance, maximized over windows.
    pub residual: T,
    pub windows: usize,
}

/// Settings of [`picard_solve_fluctuation_mild`].
#[derive(Clone, Copy, Debug)]
pub struct PicardSettings<T: Real> {
    pub dt: T,
    pub nu: T,
    /// Exponent of the `H^{-beta}` distance used for the stopping rule.
    pub beta: T,
    pub tolerance: T,
    pub max_iterations: usize,
    /// How many times a window may be halved after failing to converge.
    pub max_subdivisions: usize,
}

/// Fixed point of `phi = int e^{nu(t-r)S} [B(phi, xt) + B(xt, phi)] dr + M` on the grid of
/// `m_path` (one state per step). The time integral uses the exponential quadrature
/// `int_0^dt e^{nu r S} dr = (1 - e^{nu dt S}) / (-nu S)`, so the solution differs from
/// [`simulate_fluctuation`] by `O(dt)` while solving the same equation.
pub fn picard_solve_fluctuation_mild<T: Real>(
    m_path: &[ShellVector<T>],
    xt: &[ShellVector<T>],
    settings: PicardSettings<T>,
) -> Result<PicardSolution<T>> {
    if m_path.is_empty() || m_path.len() != xt.len() {
        return Err(Error::usage("M and the deterministic path must share a nonempty grid"));
    }
    let d = m_path[0].dim();
    let lambda = m_path[0].lambda();
    if m_path.iter().chain(xt).any(|s| s.dim() != d || s.lambda() != lambda) {
        return Err(Error::usage("paths do not match (D, lambda)"));
    }
    let PicardSettings { dt, nu, beta, tolerance, max_iterations, max_subdivisions } = settings;
    let pows = LambdaPowers::new(lambda, d + 1);
    let s: Vec<T> = (1..=d).map(|n| lambda.powi(2 * n as i32)).collect();
    let e: Vec<T> = s.iter().map(|sn| (-nu * dt * *sn).exp()).collect();
    let phi1: Vec<T> = s
        .iter()
        .zip(&e)
        .map(|(sn, en)| if nu * *sn * dt > T::lit(1e-12) { (T::one() - *en) / (nu * *sn) } else { dt })
        .collect();
    let w = sobolev_weights(lambda, -beta, d);
    let steps = m_path.len() - 1;
    // eta_k = M_{k+1} - E M_k carries the noise of step k.
    let eta: Vec<Vec<T>> = (0..steps)
        .map(|k| (0..d).map(|n| m_path[k + 1].values()[n] - e[n] * m_path[k].values()[n]).collect())
        .collect();

    let xt_max = xt.iter().map(|x| x.l2_norm()).fold(T::zero(), |a, b| a.max(b));
    let coef = T::lit(4.0) * T::SQRT_2() * crate::sequence_space::smoothing_constant(T::one()) * lambda.powf(beta) * xt_max;
    let window_steps = if coef > T::zero() && nu > T::zero() {
        let t_w = nu * (T::lit(0.5) / coef).powi(2);
        ((t_w / dt).floor().to_f64_lossy() as usize).clamp(1, steps.max(1))
    } else {
        steps.max(1)
    };

    let mut phi: Vec<Vec<T>> = vec![m_path[0].values().to_vec(); steps + 1];
    let mut f_buf = vec![T::zero(); d];
    let mut g_buf = vec![T::zero(); d];
    let mut iterations = 0;
    let mut residual = T::zero();
    let mut windows = 0;
    let mut start = 0;
    let mut width = window_steps;
    let mut halvings = 0;
    while start < steps {
        let end = (start + width).min(steps);
        let mut old: Vec<Vec<T>> = (start..=end).map(|_| phi[start].clone()).collect();
        let mut converged = false;
        let mut last = T::infinity();
        for it in 1..=max_iterations {
            let mut new = Vec::with_capacity(end - start + 1);
            new.push(phi[start].clone());
            for k in start..end {
                let prev = &old[k - start];
                bilinear_into(&pows, prev, xt[k].values(), &mut f_buf);
                bilinear_into(&pows, xt[k].values(), prev, &mut g_buf);
                let cur = &new[k - start];
                let next: Vec<T> =
                    (0..d).map(|n| e[n] * cur[n] + phi1[n] * (f_buf[n] + g_buf[n]) + eta[k][n]).collect();
                new.push(next);
            }
            let dist = new
                .iter()
                .zip(&old)
                .map(|(a, b)| {
                    let diff: Vec<T> = a.iter().zip(b).map(|(u, v)| *u - *v).collect();
                    weighted_norm_sq(&diff, &w).sqrt()
                })
                .fold(T::zero(), |m, v| m.max(v));
            old = new;
            last = dist;
            if !dist.is_finite() {
                break;
            }
            if dist < tolerance {
                iterations = iterations.max(it);
                converged = true;
                break;
            }
        }
        if converged {
            for (offset, state) in old.into_iter().enumerate().skip(1) {
                phi[start + offset] = state;
            }
            residual = residual.max(last);
            windows += 1;
            start = end;
            width = window_steps;
            halvings = 0;
        } else if width > 1 && halvings < max_subdivisions {
            width = (width / 2).max(1);
            halvings += 1;
        } else {
            return Err(Error::Convergence { iterations: max_iterations, residual: last.to_f64_lossy() });
        }
    }
    let states = phi.into_iter().map(|v| ShellVector::from_parts_unchecked(v, lambda)).collect();
    Ok(PicardSolution { states, iterations, residual, windows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(x0: Vec<f64>, theta: ThetaFamily<f64>, model: Model, scheme: Scheme) -> SdeConfig<f64> {
        let x0 = ShellVector::new(x0, 2.0).unwrap();
        let mut c = SdeConfig::new(x0, 1.0, theta, 0.01, 0.001, 11, 4).unwrap();
        c.model = model;
        c.scheme = scheme;
        c
    }

    #[test]
    fn two_shell_ito_increment_matches_component_form() {
        let c = cfg(vec![0.3, -0.2], ThetaFamily::uniform(1).unwrap(), Model::LinearGirsanov, Scheme::ItoExponential);
        let mut st = SdeStepper::new(&c, 0).unwrap();
        let x = [0.3, -0.2];
        let mut y = x;
        st.draw(0).unwrap();
        let dw = st.last_increment(1, 1);
        let mut incr = [0.0; 2];
        st.add_noise_term(&x, &mut incr);
        let s = 2f64.sqrt();
        assert_relative_eq!(incr[1], s * 2.0 * x[0] * dw, max_relative = 1e-14);
        assert_relative_eq!(incr[0], -s * 2.0 * x[1] * dw, max_relative = 1e-14);
        st.step(0, &mut y).unwrap();
        let corr = [-4.0, -20.0];
        for n in 0..2 {
            assert_relative_eq!(y[n], (0.001 * corr[n] as f64).exp() * (x[n] + incr[n]), max_relative = 1e-14);
        }
    }

    #[test]
    fn rotation_single_pair_matches_plane_rotation() {
        let c = cfg(vec![0.6, 0.8], ThetaFamily::uniform(1).unwrap(), Model::LinearGirsanov, Scheme::StratonovichRotationSplit);
        let mut st = SdeStepper::new(&c, 1).unwrap();
        let mut x = [0.6, 0.8];
        st.step(0, &mut x).unwrap();
        let phi = 2f64.sqrt() * 2.0 * st.last_increment(1, 1);
        assert_relative_eq!(x[0], 0.6 * phi.cos() - 0.8 * phi.sin(), max_relative = 1e-14);
        assert_relative_eq!(x[1], 0.6 * phi.sin() + 0.8 * phi.cos(), max_relative = 1e-14);
    }

    #[test]
    fn rest_state_is_absorbing() {
        for model in [Model::Nonlinear, Model::NonlinearViscous, Model::LinearGirsanov] {
            for scheme in [Scheme::ItoExponential, Scheme::StratonovichRotationSplit] {
                let mut c = cfg(vec![0.0; 5], ThetaFamily::uniform(3).unwrap(), model, scheme);
                c.kappa = 0.5;
                let p = simulate(&c, 2).unwrap();
                assert!(p.states.iter().all(|s| s.l2_norm() == 0.0));
            }
        }
    }

    #[test]
    fn noiseless_ito_step_is_inviscid_euler() {
        let mut c = cfg(vec![1.0, 0.5, 0.0, 0.0], ThetaFamily::uniform(2).unwrap(), Model::Nonlinear, Scheme::ItoExponential);
        c.nu = 0.0;
        let mut st = SdeStepper::new(&c, 0).unwrap();
        let mut x = [1.0, 0.5, 0.0, 0.0];
        st.step(0, &mut x).unwrap();
        let expect = [1.0 - 0.001, 0.5 + 0.002, 0.001, 0.0];
        for n in 0..4 {
            assert_relative_eq!(x[n], expect[n], max_relative = 1e-14);
        }
    }

    #[test]
    fn nonlinear_model_requires_normalized_theta() {
        let raw = ThetaFamily::custom(vec![0.5], false).unwrap();
        let c = cfg(vec![1.0, 0.0, 0.0], raw, Model::Nonlinear, Scheme::ItoExponential);
        assert!(matches!(simulate(&c, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn fluctuation_needs_matching_grid() {
        let th = ThetaFamily::unnormalized_power(3, 0.25).unwrap();
        let c = cfg(vec![0.0; 4], th, Model::Fluctuation, Scheme::ItoExponential);
        let short = vec![ShellVector::zeros(4, 2.0).unwrap(); 3];
        assert!(matches!(simulate_fluctuation(&c, &short, 0), Err(Error::Usage(_))));
        let zeros = vec![ShellVector::zeros(4, 2.0).unwrap(); 11];
        let p = simulate_fluctuation(&c, &zeros, 0).unwrap();
        assert!(p.states.iter().all(|s| s.l2_norm() == 0.0));
    }

    #[test]
    fn convolution_first_step_is_damped_noise() {
        let th = ThetaFamily::uniform(2).unwrap();
        let c = cfg(vec![0.0; 3], th, Model::ConvolutionOnly, Scheme::ItoExponential);
        let x = ShellVector::new(vec![0.5, 0.2, -0.1], 2.0).unwrap();
        let src = vec![x.clone(); 11];
        let p = stochastic_convolution_path(&c, &src, 3).unwrap();
        let mut st = SdeStepper::new(&c, 3).unwrap();
        st.draw(0).unwrap();
        let mut z = [0.0; 3];
        st.add_noise_term(x.values(), &mut z);
        for n in 0..3 {
            let e = (-0.001f64 * 4f64.powi(n as i32 + 1)).exp();
            assert_relative_eq!(p.states[1].values()[n], e * z[n], max_relative = 1e-14);
        }
    }

    #[test]
    fn picard_trivial_cases() {
        let settings = PicardSettings { dt: 0.01, nu: 1.0, beta: 0.9, tolerance: 1e-13, max_iterations: 50, max_subdivisions: 8 };
        let zeros = vec![ShellVector::<f64>::zeros(3, 2.0).unwrap(); 6];
        let sol = picard_solve_fluctuation_mild(&zeros, &zeros, settings).unwrap();
        assert!(sol.states.iter().all(|s| s.l2_norm() == 0.0));
        let m: Vec<_> = (0..6).map(|k| ShellVector::new(vec![0.1 * k as f64, -0.05, 0.02], 2.0).unwrap()).collect();
        let sol = picard_solve_fluctuation_mild(&m, &zeros, settings).unwrap();
        assert_eq!(sol.iterations, 2);
        for (a, b) in sol.states.iter().zip(&m) {
            for (u, v) in a.values().iter().zip(b.values()) {
                assert_relative_eq!(*u, *v, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn reruns_are_bit_identical() {
        let c = cfg(vec![0.5, 0.3, 0.1, 0.0, 0.0], ThetaFamily::uniform(3).unwrap(), Model::Nonlinear, Scheme::ItoExponential);
        assert_eq!(simulate(&c, 1).unwrap(), simulate(&c, 1).unwrap());
        assert_ne!(simulate(&c, 1).unwrap().states, simulate(&c, 2).unwrap().states);
    }
}
