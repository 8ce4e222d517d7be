//! TOML run configuration: parsing, key checks, validation and seed resolution.
//!
//! A file has up to four top-level keys:
//!
//! ```toml
//! command = "exp-scaling"   # optional; must match the subcommand
//! seed = 42                 # optional
//! output_dir = "out/scaling"
//!
//! [parameters]              # keys of the command's parameter set; all optional
//! dim = 16
//! families = [{ kind = "uniform", n = 4 }, { kind = "uniform", n = 8 }]
//! ```

use std::path::PathBuf;

use clap::ValueEnum;
use dyadic_core::deterministic::DetScheme;
use dyadic_core::experiments::{
    CltConfig, CorrectorConfig, DissipationConfig, GirsanovConfig, MartingaleConfig, MomentStudyConfig, ScalingConfig,
    ThetaSpec,
};
use dyadic_core::stochastic::{CorrectorForm, Model, Scheme};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "DYADIC_LAB_SEED";

/// Minimum number of families for a log-log slope fit.
pub const MIN_FAMILIES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    SimulateDet,
    SimulateSde,
    Moments,
    GirsanovCheck,
    ExpScaling,
    ExpClt,
    ExpDissipation,
    ExpMartingale,
    ExpCorrector,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SimulateDet => "simulate-det",
            Command::SimulateSde => "simulate-sde",
            Command::Moments => "moments",
            Command::GirsanovCheck => "girsanov-check",
            Command::ExpScaling => "exp-scaling",
            Command::ExpClt => "exp-clt",
            Command::ExpDissipation => "exp-dissipation",
            Command::ExpMartingale => "exp-martingale",
            Command::ExpCorrector => "exp-corrector",
        }
    }
}

/// Deterministic trajectory from `x0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetParams {
    pub lambda: f64,
    pub dim: usize,
    pub x0: Vec<f64>,
    pub nu: f64,
    pub alpha: f64,
    pub t_end: f64,
    /// Defaults to the advective CFL step.
    pub dt: Option<f64>,
    pub stride: usize,
    pub scheme: DetScheme,
    pub nonlinear: bool,
}

impl Default for DetParams {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            dim: 16,
            x0: vec![0.8, 0.6],
            nu: 1.0,
            alpha: 1.0,
            t_end: 1.0,
            dt: None,
            stride: 1,
            scheme: DetScheme::ExponentialEuler,
            nonlinear: true,
        }
    }
}

/// Ensemble of stochastic paths from `x0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeParams {
    pub lambda: f64,
    pub dim: usize,
    pub x0: Vec<f64>,
    pub nu: f64,
    pub kappa: f64,
    pub theta: ThetaSpec,
    pub t_end: f64,
    /// Defaults to the step meeting both CFL numbers.
    pub dt: Option<f64>,
    pub model: Model,
    pub scheme: Scheme,
    pub corrector: CorrectorForm,
    pub stride: usize,
    pub blowup_factor: f64,
    pub trajectories: u64,
    #[serde(skip_deserializing)]
    pub seed: u64,
}

impl Default for SdeParams {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            dim: 16,
            x0: vec![0.8, 0.6],
            nu: 1.0,
            kappa: 0.0,
            theta: ThetaSpec::Uniform { n: 4 },
            t_end: 1.0,
            dt: None,
            model: Model::Nonlinear,
            scheme: Scheme::ItoExponential,
            corrector: CorrectorForm::Full,
            stride: 1,
            blowup_factor: 2.0,
            trajectories: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Params {
    SimulateDet(DetParams),
    SimulateSde(SdeParams),
    Moments(MomentStudyConfig),
    GirsanovCheck(GirsanovConfig),
    Scaling(ScalingConfig),
    Clt(CltConfig),
    Dissipation(DissipationConfig),
    Martingale(MartingaleConfig),
    Corrector(CorrectorConfig),
}

impl Params {
    fn set_seed(&mut self, seed: u64) {
        match self {
            Params::SimulateDet(_) | Params::Corrector(_) => {}
            Params::SimulateSde(p) => p.seed = seed,
            Params::Moments(p) => p.seed = seed,
            Params::GirsanovCheck(p) => p.seed = seed,
            Params::Scaling(p) => p.seed = seed,
            Params::Clt(p) => p.seed = seed,
            Params::Dissipation(p) => p.seed = seed,
            Params::Martingale(p) => p.seed = seed,
        }
    }

    /// The resolved parameter set as JSON, for summaries.
    pub fn to_json(&self) -> serde_json::Value {
        let v = match self {
            Params::SimulateDet(p) => serde_json::to_value(p),
            Params::SimulateSde(p) => serde_json::to_value(p),
            Params::Moments(p) => serde_json::to_value(p),
            Params::GirsanovCheck(p) => serde_json::to_value(p),
            Params::Scaling(p) => serde_json::to_value(p),
            Params::Clt(p) => serde_json::to_value(p),
            Params::Dissipation(p) => serde_json::to_value(p),
            Params::Martingale(p) => serde_json::to_value(p),
            Params::Corrector(p) => serde_json::to_value(p),
        };
        v.unwrap_or(serde_json::Value::Null)
    }
}

/// A parsed file before the command line and environment are applied.
#[derive(Clone, Debug, PartialEq)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub params: Params,
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub params: Params,
}

/// Parses and validates a file for `command`, returning every violation found.
pub fn parse_config(text: &str, command: Command) -> Result<FileConfig, Vec<String>> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| vec![format!("syntax error: {e}")])?;
    let mut errors = vec![];
    if let Some(v) = table.remove("command") {
        match v.as_str() {
            Some(c) if c == command.name() => {}
            _ => errors.push(format!("command: file names {v}, subcommand is {}", command.name())),
        }
    }
    let seed = match table.remove("seed") {
        None => None,
        Some(toml::Value::Integer(s)) if s >= 0 => Some(s as u64),
        Some(v) => {
            errors.push(format!("seed: must be a nonnegative integer, got {v}"));
            None
        }
    };
    let output_dir = match table.remove("output_dir") {
        None => None,
        Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
        Some(v) => {
            errors.push(format!("output_dir: must be a string, got {v}"));
            None
        }
    };
    let params = match table.remove("parameters") {
        None => toml::Table::new(),
        Some(toml::Value::Table(t)) => t,
        Some(v) => {
            errors.push(format!("parameters: must be a table, got {v}"));
            toml::Table::new()
        }
    };
    for key in table.keys() {
        errors.push(format!("{key}: unknown top-level key (expected command, seed, output_dir, parameters)"));
    }
    let params = match command {
        Command::SimulateDet => section(params, &mut errors, det_violations).map(Params::SimulateDet),
        Command::SimulateSde => section(params, &mut errors, sde_violations).map(Params::SimulateSde),
        Command::Moments => section(params, &mut errors, MomentStudyConfig::validate).map(Params::Moments),
        Command::GirsanovCheck => section(params, &mut errors, GirsanovConfig::validate).map(Params::GirsanovCheck),
        Command::ExpScaling => section(params, &mut errors, |c: &ScalingConfig| {
            with_family_count(c.validate(), c.families.len())
        })
        .map(Params::Scaling),
        Command::ExpClt => section(params, &mut errors, CltConfig::validate).map(Params::Clt),
        Command::ExpDissipation => section(params, &mut errors, DissipationConfig::validate).map(Params::Dissipation),
        Command::ExpMartingale => section(params, &mut errors, |c: &MartingaleConfig| {
            with_family_count(c.validate(), c.families.len())
        })
        .map(Params::Martingale),
        Command::ExpCorrector => section(params, &mut errors, CorrectorConfig::validate).map(Params::Corrector),
    };
    match params {
        Some(params) if errors.is_empty() => Ok(FileConfig { seed, output_dir, params }),
        _ => Err(errors),
    }
}

/// Checks keys against the defaults, deserializes, then runs `validate`.
fn section<T, F>(params: toml::Table, errors: &mut Vec<String>, validate: F) -> Option<T>
where
    T: Default + Serialize + DeserializeOwned,
    F: Fn(&T) -> Vec<String>,
{
    let known: Vec<String> = match serde_json::to_value(T::default()) {
        Ok(serde_json::Value::Object(m)) => m.keys().filter(|k| *k != "seed").cloned().collect(),
        _ => vec![],
    };
    let mut unknown = false;
    for key in params.keys() {
        if !known.contains(key) {
            unknown = true;
            let hint = if key == "seed" { " (seed is a top-level key)" } else { "" };
            errors.push(format!("parameters.{key}: unknown key{hint}"));
        }
    }
    if unknown {
        return None;
    }
    match toml::Value::Table(params).try_into::<T>() {
        Ok(v) => {
            errors.extend(validate(&v));
            Some(v)
        }
        Err(e) => {
            errors.push(format!("parameters: {}", e.to_string().trim()));
            None
        }
    }
}

fn with_family_count(mut v: Vec<String>, n: usize) -> Vec<String> {
    if n < MIN_FAMILIES {
        v.push(format!("families: the slope fit needs at least {MIN_FAMILIES} families, got {n}"));
    }
    v
}

fn grid(lambda: f64, dim: usize, x0: &[f64], t_end: f64, dt: Option<f64>) -> Vec<String> {
    let mut v = vec![];
    if !(lambda > 1.0 && lambda.is_finite()) {
        v.push(format!("lambda must exceed 1, got {lambda}"));
    }
    if dim == 0 {
        v.push("dim must be at least 1".into());
    }
    if x0.len() > dim {
        v.push(format!("x0 has {} entries, dim = {dim}", x0.len()));
    }
    if x0.iter().any(|c| !c.is_finite()) {
        v.push("x0 entries must be finite".into());
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        v.push(format!("t_end must be positive, got {t_end}"));
    }
    if let Some(dt) = dt {
        if !(dt > 0.0 && dt <= t_end) {
            v.push(format!("dt must lie in (0, t_end], got {dt}"));
        } else if ((t_end / dt) - (t_end / dt).round()).abs() > 1e-6 * (t_end / dt) {
            v.push(format!("t_end / dt must be an integer, got {}", t_end / dt));
        }
    }
    v
}

fn det_violations(p: &DetParams) -> Vec<String> {
    let mut v = grid(p.lambda, p.dim, &p.x0, p.t_end, p.dt);
    if !(p.nu >= 0.0) {
        v.push(format!("nu must be nonnegative, got {}", p.nu));
    }
    if !(p.alpha > 0.0) {
        v.push(format!("alpha must be positive, got {}", p.alpha));
    }
    if p.stride == 0 {
        v.push("stride must be at least 1".into());
    }
    v
}

fn sde_violations(p: &SdeParams) -> Vec<String> {
    let mut v = grid(p.lambda, p.dim, &p.x0, p.t_end, p.dt);
    if p.dim < 2 {
        v.push("stochastic models need dim >= 2".into());
    }
    if !(p.nu >= 0.0) || !(p.kappa >= 0.0) {
        v.push(format!("nu and kappa must be nonnegative, got {} and {}", p.nu, p.kappa));
    }
    match p.theta.build() {
        Ok(t) => {
            let normalized_needed = p.model == Model::Nonlinear
                || (p.scheme == Scheme::ItoExponential
                    && p.corrector == CorrectorForm::Full
                    && matches!(p.model, Model::NonlinearViscous | Model::LinearGirsanov));
            if normalized_needed && !t.is_normalized() {
                v.push(format!("theta must have unit l2 norm for this model and scheme, got {}", t.l2()));
            }
        }
        Err(e) => v.push(format!("theta: {e}")),
    }
    if matches!(p.model, Model::Fluctuation) {
        v.push("model fluctuation needs a reference path; use exp-clt".into());
    }
    if p.stride == 0 {
        v.push("stride must be at least 1".into());
    }
    if !(p.blowup_factor > 1.0) {
        v.push(format!("blowup_factor must exceed 1, got {}", p.blowup_factor));
    }
    if p.trajectories == 0 {
        v.push("trajectories must be at least 1".into());
    }
    v
}

/// Seed precedence: command line, then environment, then file, then zero.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, file: Option<u64>) -> Result<u64, String> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(e) = env {
        return e.trim().parse().map_err(|_| format!("{SEED_ENV}: expected a nonnegative integer, got {e:?}"));
    }
    Ok(file.unwrap_or(0))
}

pub fn resolve(command: Command, file: FileConfig, seed: u64, out: Option<PathBuf>) -> RunConfig {
    let mut params = file.params;
    params.set_seed(seed);
    let output_dir = out.or(file.output_dir).unwrap_or_else(|| PathBuf::from("out").join(command.name()));
    RunConfig { command, seed, output_dir, params }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_simulate_det_gets_defaults() {
        let c = parse_config("", Command::SimulateDet).unwrap();
        assert_eq!(c.params, Params::SimulateDet(DetParams::default()));
        assert_eq!(c.seed, None);
    }

    #[test]
    fn all_violations_are_reported() {
        let text = "extra = 1\n[parameters]\nlambda = 0.5\nnu = -1.0\nstride = 0\n";
        let e = parse_config(text, Command::SimulateDet).unwrap_err();
        assert_eq!(e.len(), 4, "{e:?}");
        let e = parse_config("[parameters]\nbogus = 1\nother = 2\n", Command::SimulateDet).unwrap_err();
        assert_eq!(e.len(), 2, "{e:?}");
    }

    #[test]
    fn syntax_error_names_line() {
        let e = parse_config("seed = 1\nx = \n", Command::SimulateDet).unwrap_err();
        assert!(e[0].contains("line 2"), "{e:?}");
    }

    #[test]
    fn command_mismatch_rejected() {
        assert!(parse_config("command = \"exp-clt\"", Command::SimulateDet).is_err());
        assert!(parse_config("command = \"simulate-det\"", Command::SimulateDet).is_ok());
    }

    #[test]
    fn seed_inside_parameters_points_to_top_level() {
        let e = parse_config("[parameters]\nseed = 3\n", Command::ExpClt).unwrap_err();
        assert!(e[0].contains("top-level"));
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some("2"), Some(3)), Ok(1));
        assert_eq!(resolve_seed(None, Some("2"), Some(3)), Ok(2));
        assert_eq!(resolve_seed(None, None, Some(3)), Ok(3));
        assert_eq!(resolve_seed(None, None, None), Ok(0));
        assert!(resolve_seed(None, Some("x"), None).is_err());
    }

    #[test]
    fn resolve_fills_seed_and_directory() {
        let f = parse_config("seed = 5\n", Command::ExpClt).unwrap();
        let r = resolve(Command::ExpClt, f, 9, None);
        assert_eq!(r.output_dir, PathBuf::from("out/exp-clt"));
        match r.params {
            Params::Clt(c) => assert_eq!(c.seed, 9),
            _ => unreachable!(),
        }
    }
}
