//! Ensemble statistics and log-log rate fits.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::CompensatedSum;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

pub fn mean(xs: &[f64]) -> f64 {
    let mut acc = CompensatedSum::new();
    for x in xs {
        acc.add(*x);
    }
    acc.value() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two samples.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let mut acc = CompensatedSum::new();
    for x in xs {
        acc.add((x - m) * (x - m));
    }
    acc.value() / (xs.len() - 1) as f64
}

pub fn standard_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Checkpoint {
    pub time: f64,
    pub mean: f64,
    pub variance: f64,
    pub ci_half_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub checkpoints: Vec<Checkpoint>,
    pub samples: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EnsembleSummary {
    /// `per_time[k]` holds the samples at `times[k]`.
    pub fn from_samples(times: &[f64], per_time: &[Vec<f64>], seed: u64, config_hash: impl Into<String>) -> Result<Self> {
        if times.len() != per_time.len() {
            return Err(Error::usage("one sample set per checkpoint required"));
        }
        let samples = per_time.first().map_or(0, |v| v.len());
        if per_time.iter().any(|v| v.len() != samples) || samples == 0 {
            return Err(Error::usage("checkpoints must share a nonzero sample count"));
        }
        let checkpoints = times
            .iter()
            .zip(per_time)
            .map(|(t, xs)| {
                let var = variance(xs);
                Checkpoint { time: *t, mean: mean(xs), variance: var, ci_half_width: Z95 * (var / samples as f64).sqrt() }
            })
            .collect();
        Ok(Self { checkpoints, samples, seed, config_hash: config_hash.into() })
    }
}

/// Least-squares line through `(log x, log y)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub residual_norm: f64,
}

pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::usage(format!("slope fit needs at least 3 points, got {}", points.len())));
    }
    if let Some((x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(Error::usage(format!("log-log fit needs positive finite coordinates, got ({x}, {y})")));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let mut sxx = CompensatedSum::new();
    let mut sxy = CompensatedSum::new();
    for (a, b) in lx.iter().zip(&ly) {
        sxx.add((a - mx) * (a - mx));
        sxy.add((a - mx) * (b - my));
    }
    if sxx.value() == 0.0 {
        return Err(Error::usage("slope fit needs at least two distinct abscissae"));
    }
    let slope = sxy.value() / sxx.value();
    let intercept = my - slope * mx;
    let mut res = CompensatedSum::new();
    for (a, b) in lx.iter().zip(&ly) {
        res.add((b - intercept - slope * a).powi(2));
    }
    Ok(RateFit {
        x: points.iter().map(|p| p.0).collect(),
        y: points.iter().map(|p| p.1).collect(),
        slope,
        intercept,
        residual_norm: res.value().sqrt(),
    })
}

/// Sample skewness `g1` and excess kurtosis `g2` with their normal-theory standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShapeStats {
    pub skewness: f64,
    pub skewness_se: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_se: f64,
}

pub fn shape_stats(xs: &[f64]) -> Result<ShapeStats> {
    let n = xs.len();
    if n < 4 {
        return Err(Error::usage("shape statistics need at least 4 samples"));
    }
    let m = mean(xs);
    let (mut m2, mut m3, mut m4) = (CompensatedSum::new(), CompensatedSum::new(), CompensatedSum::new());
    for x in xs {
        let d = x - m;
        m2.add(d * d);
        m3.add(d * d * d);
        m4.add(d * d * d * d);
    }
    let nf = n as f64;
    let (m2, m3, m4) = (m2.value() / nf, m3.value() / nf, m4.value() / nf);
    let (skewness, excess_kurtosis) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0) } else { (0.0, 0.0) };
    let skewness_se = (6.0 * nf * (nf - 1.0) / ((nf - 2.0) * (nf + 1.0) * (nf + 3.0))).sqrt();
    let kurtosis_se = 2.0 * skewness_se * ((nf * nf - 1.0) / ((nf - 3.0) * (nf + 5.0))).sqrt();
    Ok(ShapeStats { skewness, skewness_se, excess_kurtosis, kurtosis_se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fit_examples() {
        let sq: Vec<_> = [1.0, 2.0, 3.0, 5.0].iter().map(|x: &f64| (*x, x * x)).collect();
        let f = fit_loglog_slope(&sq).unwrap();
        assert_relative_eq!(f.slope, 2.0, epsilon = 1e-14);
        assert!(f.residual_norm < 1e-14);
        let flat = fit_loglog_slope(&[(1.0, 4.0), (2.0, 4.0), (7.0, 4.0)]).unwrap();
        assert_eq!(flat.slope, 0.0);
        let p: Vec<_> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|x| (*x, 3.0 * x.powf(1.7))).collect();
        let f = fit_loglog_slope(&p).unwrap();
        assert!((f.slope - 1.7).abs() <= 1e-12);
        assert_relative_eq!(f.intercept, 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn fit_rejections() {
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
        assert!(fit_loglog_slope(&[(-1.0, 1.0), (2.0, 1.0), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn summary_half_width() {
        let s = EnsembleSummary::from_samples(&[0.0, 1.0], &[vec![1.0, 3.0], vec![2.0, 2.0]], 7, "h").unwrap();
        assert_eq!(s.checkpoints[0].mean, 2.0);
        assert_eq!(s.checkpoints[0].variance, 2.0);
        assert_relative_eq!(s.checkpoints[0].ci_half_width, 1.96);
        assert_eq!(s.checkpoints[1].ci_half_width, 0.0);
    }

    #[test]
    fn shape_of_symmetric_two_point_law() {
        let xs: Vec<f64> = (0..100).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let s = shape_stats(&xs).unwrap();
        assert_eq!(s.skewness, 0.0);
        assert_relative_eq!(s.excess_kurtosis, -2.0);
    }
}
