//! Shell vectors, weighted norms and the operators acting on them.
//!
//! Shells are numbered from 1 in the documentation and stored from 0. A vector of
//! length `D` stands for the infinite sequence padded with zeros, so
//!
//! ```text
//! |x|_{H^s}^2 = sum_n lambda^{2ns} x_n^2
//! B(x,y)_n    = lambda^{n-1} x_{n-1} y_{n-1} - lambda^n x_n y_{n+1},   x_0 = y_{D+1} = 0
//! (A_{i,i+j} x)_i = -x_{i+j},   (A_{i,i+j} x)_{i+j} = x_i
//! ```

use crate::error::{Error, Result};
use crate::noise::ThetaFamily;
use crate::scalar::{CompensatedSum, Real};

/// Truncated shell sequence `x_1..x_D` with shell ratio `lambda`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShellVector<T: Real> {
    values: Vec<T>,
    lambda: T,
}

/// Sobolev exponent `s` of an `H^s` norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SobolevIndex<T: Real>(pub T);

impl<T: Real> ShellVector<T> {
    pub fn new(values: Vec<T>, lambda: T) -> Result<Self> {
        check_lambda(lambda)?;
        if values.is_empty() {
            return Err(Error::usage("a shell vector needs at least one shell"));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Range { shell: k + 1, what: "non-finite amplitude".into() });
        }
        Ok(Self { values, lambda })
    }

    pub fn zeros(dim: usize, lambda: T) -> Result<Self> {
        Self::new(vec![T::zero(); dim], lambda)
    }

    /// Unit vector `e_n` (1-based).
    pub fn basis(n: usize, dim: usize, lambda: T) -> Result<Self> {
        if n == 0 || n > dim {
            return Err(Error::index(format!("basis index {n} outside 1..={dim}")));
        }
        let mut v = vec![T::zero(); dim];
        v[n - 1] = T::one();
        Self::new(v, lambda)
    }

    pub(crate) fn from_parts_unchecked(values: Vec<T>, lambda: T) -> Self {
        Self { values, lambda }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Amplitude of shell `n` (1-based); zero beyond the truncation.
    pub fn get(&self, n: usize) -> T {
        if n == 0 || n > self.values.len() {
            T::zero()
        } else {
            self.values[n - 1]
        }
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        check_compatible(self, other)?;
        let mut acc = CompensatedSum::new();
        for (a, b) in self.values.iter().zip(&other.values).rev() {
            acc.add(*a * *b);
        }
        Ok(acc.value())
    }

    pub fn l2_norm(&self) -> T {
        l2_norm_sq(&self.values).sqrt()
    }

    pub fn scaled(&self, c: T) -> Self {
        Self::from_parts_unchecked(self.values.iter().map(|v| *v * c).collect(), self.lambda)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_compatible(self, other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| *a - *b).collect();
        Self::new(values, self.lambda)
    }
}

fn check_lambda<T: Real>(lambda: T) -> Result<()> {
    if !(lambda.is_finite() && lambda > T::one()) {
        return Err(Error::usage(format!("shell ratio must satisfy lambda > 1, got {lambda}")));
    }
    Ok(())
}

fn check_compatible<T: Real>(x: &ShellVector<T>, y: &ShellVector<T>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::usage(format!("dimension mismatch: {} vs {}", x.dim(), y.dim())));
    }
    if x.lambda != y.lambda {
        return Err(Error::usage(format!("shell ratio mismatch: {} vs {}", x.lambda, y.lambda)));
    }
    Ok(())
}

/// Powers `lambda^k` for `k = 0..=max_exp`, used by the time steppers.
#[derive(Clone, Debug)]
pub struct LambdaPowers<T: Real> {
    pows: Vec<T>,
}

impl<T: Real> LambdaPowers<T> {
    pub fn new(lambda: T, max_exp: usize) -> Self {
        let pows = (0..=max_exp).map(|k| lambda.powi(k as i32)).collect();
        Self { pows }
    }

    #[inline]
    pub fn get(&self, k: usize) -> T {
        self.pows[k]
    }
}

/// Weights `lambda^{2ns}` for `n = 1..=dim`.
pub fn sobolev_weights<T: Real>(lambda: T, s: T, dim: usize) -> Vec<T> {
    let two = T::lit(2.0);
    (1..=dim).map(|n| lambda.powf(two * s * T::from_usize_lossy(n))).collect()
}

/// `sum_n w_n x_n^2`, accumulated from the top shell downward.
pub fn weighted_norm_sq<T: Real>(x: &[T], weights: &[T]) -> T {
    let mut acc = CompensatedSum::new();
    for (v, w) in x.iter().zip(weights).rev() {
        acc.add(*w * *v * *v);
    }
    acc.value()
}

pub fn l2_norm_sq<T: Real>(x: &[T]) -> T {
    let mut acc = CompensatedSum::new();
    for v in x.iter().rev() {
        acc.add(*v * *v);
    }
    acc.value()
}

/// `|x|_{H^s}`.
pub fn hs_norm<T: Real>(x: &ShellVector<T>, s: SobolevIndex<T>) -> Result<T> {
    let two = T::lit(2.0);
    let mut acc = CompensatedSum::new();
    for (k, v) in x.values.iter().enumerate().rev() {
        let n = T::from_usize_lossy(k + 1);
        let term = x.lambda.powf(two * s.0 * n) * *v * *v;
        if !term.is_finite() {
            return Err(Error::Range { shell: k + 1, what: format!("H^{} weight overflow", s.0) });
        }
        acc.add(term);
        if !acc.value().is_finite() {
            return Err(Error::Range { shell: k + 1, what: format!("H^{} sum overflow", s.0) });
        }
    }
    Ok(acc.value().sqrt())
}

/// A priori bound `lambda^{-2sD} |x|^2` on the contribution of shells beyond `D`
/// to `|x|^2_{H^{-s}}`, for `s > 0` and an `l2` bound on the whole sequence.
pub fn negative_norm_tail_bound<T: Real>(l2_bound: T, s: T, lambda: T, dim: usize) -> T {
    lambda.powf(-T::lit(2.0) * s * T::from_usize_lossy(dim)) * l2_bound * l2_bound
}

/// Writes `B(x,y)` into `out`; `pows` must reach exponent `D`.
#[inline]
pub fn bilinear_into<T: Real>(pows: &LambdaPowers<T>, x: &[T], y: &[T], out: &mut [T]) {
    let d = x.len();
    for k in 0..d {
        let prod = if k > 0 { pows.get(k) * x[k - 1] * y[k - 1] } else { T::zero() };
        let loss = if k + 1 < d { pows.get(k + 1) * x[k] * y[k + 1] } else { T::zero() };
        out[k] = prod - loss;
    }
}

pub fn bilinear_b<T: Real>(x: &ShellVector<T>, y: &ShellVector<T>) -> Result<ShellVector<T>> {
    check_compatible(x, y)?;
    let pows = LambdaPowers::new(x.lambda, x.dim());
    let mut out = vec![T::zero(); x.dim()];
    bilinear_into(&pows, &x.values, &y.values, &mut out);
    ShellVector::new(out, x.lambda)
}

/// `A_{i,i+j} x` with 1-based `i`.
pub fn apply_rotation_generator<T: Real>(i: usize, j: usize, x: &ShellVector<T>) -> Result<ShellVector<T>> {
    if i == 0 || j == 0 || i + j > x.dim() {
        return Err(Error::index(format!("generator ({i},{}) outside 1..={}", i + j, x.dim())));
    }
    let mut out = vec![T::zero(); x.dim()];
    out[i - 1] = -x.values[i + j - 1];
    out[i + j - 1] = x.values[i - 1];
    Ok(ShellVector::from_parts_unchecked(out, x.lambda))
}

/// Which operator a diagonal represents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OperatorKind<T: Real> {
    S,
    SAlpha(T),
    STheta,
    SThetaGalerkin(usize),
    NeighborCorrector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalOperator<T: Real> {
    entries: Vec<T>,
    kind: OperatorKind<T>,
}

impl<T: Real> DiagonalOperator<T> {
    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn kind(&self) -> OperatorKind<T> {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }
}

/// `S^alpha = -diag(lambda^{2 alpha n})`.
pub fn build_s_alpha<T: Real>(alpha: T, lambda: T, dim: usize) -> Result<DiagonalOperator<T>> {
    check_lambda(lambda)?;
    if !(alpha > T::zero() && alpha.is_finite()) {
        return Err(Error::usage(format!("dissipation degree must be positive, got {alpha}")));
    }
    let entries = if alpha == T::one() {
        (1..=dim).map(|n| -lambda.powi(2 * n as i32)).collect()
    } else {
        sobolev_weights(lambda, alpha, dim).into_iter().map(|w| -w).collect()
    };
    let kind = if alpha == T::one() { OperatorKind::S } else { OperatorKind::SAlpha(alpha) };
    Ok(DiagonalOperator { entries, kind })
}

/// Tolerance on `|theta|_{l2} = 1` for the scalar type in use.
pub(crate) fn normalization_tolerance<T: Real>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(16.0))
}

/// Stratonovich-to-Ito corrector. Without `galerkin_n` this is the closed form
/// `-(lambda^{2n} + sum_{j<n} theta_j^2 lambda^{2(n-j)})`; with `Some(N)` it is the
/// corrector of the system truncated at `N` shells, zero beyond `N`.
pub fn build_corrector_s_theta<T: Real>(
    theta: &ThetaFamily<T>,
    lambda: T,
    dim: usize,
    galerkin_n: Option<usize>,
) -> Result<DiagonalOperator<T>> {
    check_lambda(lambda)?;
    let th2 = |j: usize| {
        let t = theta.get(j);
        t * t
    };
    let lp = |k: usize| lambda.powi(2 * k as i32);
    match galerkin_n {
        None => {
            if (theta.l2() - T::one()).abs() > normalization_tolerance() {
                return Err(Error::usage(format!(
                    "closed-form corrector needs |theta|_l2 = 1, got {}",
                    theta.l2()
                )));
            }
            let entries = (1..=dim)
                .map(|n| {
                    let mut acc = lp(n);
                    for j in 1..n {
                        acc = acc + th2(j) * lp(n - j);
                    }
                    -acc
                })
                .collect();
            Ok(DiagonalOperator { entries, kind: OperatorKind::STheta })
        }
        Some(big_n) => {
            let entries = (1..=dim)
                .map(|n| {
                    if n > big_n {
                        return T::zero();
                    }
                    let mut up = T::zero();
                    for j in 1..n {
                        up = up + lp(j) * th2(n - j);
                    }
                    let mut tail = T::zero();
                    for j in 1..=(big_n - n) {
                        tail = tail + th2(j);
                    }
                    -(up + lp(n) * tail)
                })
                .collect();
            Ok(DiagonalOperator { entries, kind: OperatorKind::SThetaGalerkin(big_n) })
        }
    }
}

/// Diagonal of `sum_i theta_i^2 lambda^{2i} A_{i,i+1}^2`, the corrector of the
/// nearest-neighbour noise with weights `theta`.
pub fn build_neighbor_corrector<T: Real>(theta: &[T], lambda: T, dim: usize) -> Result<DiagonalOperator<T>> {
    check_lambda(lambda)?;
    let th2 = |i: usize| theta.get(i - 1).map_or(T::zero(), |t| *t * *t);
    let lp = |k: usize| lambda.powi(2 * k as i32);
    let entries = (1..=dim)
        .map(|n| if n == 1 { -th2(1) * lp(1) } else { -(th2(n - 1) * lp(n - 1) + th2(n) * lp(n)) })
        .collect();
    Ok(DiagonalOperator { entries, kind: OperatorKind::NeighborCorrector })
}

/// `e^{nu t D} x` for a nonpositive diagonal `D`.
pub fn semigroup_apply<T: Real>(
    t: T,
    nu: T,
    op: &DiagonalOperator<T>,
    x: &ShellVector<T>,
) -> Result<ShellVector<T>> {
    if !(t >= T::zero()) || !(nu >= T::zero()) {
        return Err(Error::usage("semigroup needs t >= 0 and nu >= 0"));
    }
    if op.dim() != x.dim() {
        return Err(Error::usage(format!("operator has {} entries, vector {}", op.dim(), x.dim())));
    }
    if let Some(k) = op.entries.iter().position(|d| *d > T::zero()) {
        return Err(Error::usage(format!("positive diagonal entry at shell {}", k + 1)));
    }
    let values = x.values.iter().zip(&op.entries).map(|(v, d)| *v * (nu * t * *d).exp()).collect();
    Ok(ShellVector::from_parts_unchecked(values, x.lambda))
}

/// Constant `sqrt(2) max(lambda^{-1+a+b}, lambda^{-b})` in
/// `|B(x,y)|_{H^{-1+a+b}} <= C |x|_{H^a} |y|_{H^b}`.
pub fn bilinear_bound_constant<T: Real>(lambda: T, a: T, b: T) -> T {
    T::SQRT_2() * lambda.powf(-T::one() + a + b).max(lambda.powf(-b))
}

/// Constant `(rho/(2e))^{rho/2}` in `|e^{tS}x|_{H^{a+rho}} <= C t^{-rho/2} |x|_{H^a}`.
pub fn smoothing_constant<T: Real>(rho: T) -> T {
    let two = T::lit(2.0);
    (rho / (two * T::E())).powf(rho / two)
}
