//! Runs a resolved configuration and writes its artifacts.

use std::path::Path;

use dyadic_core::deterministic::{default_dt, energy_equality_residual, solve_deterministic, DetConfig};
use dyadic_core::experiments::{
    corrector_checks, run_clt, run_dissipation, run_girsanov_check, run_martingale_vanishing, run_moment_study,
    run_neighbor_corrector_decay, run_scaling_limit, summary_value, write_corrector_artifacts, Check,
};
use dyadic_core::io::{fmt_f64, write_dat, write_json, Table};
use dyadic_core::sequence_space::ShellVector;
use dyadic_core::stats::{mean, standard_error};
use dyadic_core::stochastic::{default_sde_dt, simulate, SdeConfig};
use dyadic_core::{Error, Result};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{DetParams, Params, RunConfig, SdeParams};

/// CFL numbers above this are recorded as warnings.
pub const CFL_LIMIT: f64 = 0.1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

pub fn dispatch(cfg: &RunConfig) -> Result<Outcome> {
    let dir = cfg.output_dir.as_path();
    match &cfg.params {
        Params::SimulateDet(p) => simulate_det(p, cfg.seed, dir),
        Params::SimulateSde(p) => simulate_sde(p, dir),
        Params::Moments(c) => {
            let r = run_moment_study(c)?;
            r.write_artifacts(dir, c)?;
            Ok(Outcome { checks: r.checks(), warnings: vec![] })
        }
        Params::GirsanovCheck(c) => {
            let r = run_girsanov_check(c)?;
            r.write_artifacts(dir, c)?;
            Ok(Outcome { checks: r.checks(), warnings: r.reweighted.warning.iter().cloned().collect() })
        }
        Params::Scaling(c) => {
            let r = run_scaling_limit(c)?;
            r.write_artifacts(dir, c)?;
            Ok(Outcome { checks: r.checks(), warnings: vec![] })
        }
        Params::Clt(c) => {
            let r = run_clt(c)?;
            r.write_artifacts(dir, c)?;
            Ok(Outcome { checks: r.checks(), warnings: vec![] })
        }
        Params::Dissipation(c) => {
            let r = run_dissipation(c)?;
            r.write_artifacts(dir, c)?;
            Ok(Outcome { checks: r.checks(), warnings: vec![] })
        }
        Params::Martingale(c) => {
            let r = run_martingale_vanishing(c)?;
            r.write_artifacts(dir, c)?;
            Ok(Outcome { checks: r.checks(), warnings: vec![] })
        }
        Params::Corrector(c) => {
            let rows = run_neighbor_corrector_decay(c)?;
            write_corrector_artifacts(dir, c, &rows)?;
            Ok(Outcome { checks: corrector_checks(&rows), warnings: vec![] })
        }
    }
}

fn shell_vector(x0: &[f64], lambda: f64, dim: usize) -> Result<ShellVector<f64>> {
    let mut v = x0.to_vec();
    v.resize(dim, 0.0);
    ShellVector::new(v, lambda)
}

fn state_header(first: &[&str], dim: usize, last: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = first.iter().map(|s| s.to_string()).collect();
    h.extend((1..=dim).map(|n| format!("x_{n}")));
    h.extend(last.iter().map(|s| s.to_string()));
    h
}

fn simulate_det(p: &DetParams, seed: u64, dir: &Path) -> Result<Outcome> {
    let x0 = shell_vector(&p.x0, p.lambda, p.dim)?;
    let mut cfg = DetConfig::new(x0, p.nu, p.alpha, p.t_end);
    if let Some(dt) = p.dt {
        cfg.dt = dt;
    } else {
        // the default step must divide the horizon
        cfg.dt = p.t_end / (p.t_end / default_dt(&cfg.x0)).ceil();
    }
    cfg.output_stride = p.stride;
    cfg.scheme = p.scheme;
    cfg.nonlinear = p.nonlinear;
    let mut warnings = vec![];
    let cfl = cfg.advective_cfl();
    if cfl > CFL_LIMIT {
        warnings.push(format!("advective CFL number {cfl:.3e} exceeds {CFL_LIMIT}"));
    }
    let traj = solve_deterministic(&cfg)?;
    let mut table = Table::new(state_header(&["time"], p.dim, &["l2_norm", "h_alpha_norm"]));
    for k in 0..traj.len() {
        let mut row = vec![fmt_f64(traj.times[k])];
        row.extend(traj.states[k].values().iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(traj.l2_norm[k]));
        row.push(fmt_f64(traj.h_alpha_norm[k]));
        table.push(row);
    }
    let residual = energy_equality_residual(&traj, p.nu, p.alpha).total();
    let body = json!({
        "dt": cfg.dt,
        "advective_cfl": cfl,
        "stability_audit": cfg.stability_audit(),
        "energy_residual": residual,
        "warnings": warnings,
    });
    let summary = summary_value("simulate_det", p, seed, body)?;
    let energy: Vec<_> = traj.times.iter().zip(&traj.l2_norm).map(|(t, n)| (*t, n * n, 0.0)).collect();
    table.write(&dir.join("results.csv"))?;
    write_dat(&dir.join("energy.dat"), "t vs |X|^2", &energy)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(Outcome { checks: vec![], warnings })
}

fn simulate_sde(p: &SdeParams, dir: &Path) -> Result<Outcome> {
    let x0 = shell_vector(&p.x0, p.lambda, p.dim)?;
    let theta = p.theta.build()?;
    let dt = match p.dt {
        Some(dt) => dt,
        None => p.t_end / (p.t_end / default_sde_dt(&x0, p.nu, &theta)).ceil(),
    };
    let mut cfg = SdeConfig::new(x0, p.nu, theta, p.t_end, dt, p.seed, p.trajectories)?;
    cfg.kappa = p.kappa;
    cfg.model = p.model;
    cfg.scheme = p.scheme;
    cfg.corrector = p.corrector;
    cfg.output_stride = p.stride;
    cfg.blowup_factor = p.blowup_factor;
    cfg.validate()?;
    let mut warnings = vec![];
    let (adv, noise) = cfg.cfl_audit();
    if adv > CFL_LIMIT {
        warnings.push(format!("dt = {dt} is above the CFL audit: advective number {adv:.3e} exceeds {CFL_LIMIT}"));
    }
    if noise > CFL_LIMIT {
        warnings.push(format!("dt = {dt} is above the CFL audit: noise number {noise:.3e} exceeds {CFL_LIMIT}"));
    }
    let paths = (0..p.trajectories).into_par_iter().map(|tr| simulate(&cfg, tr)).collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(state_header(&["trajectory", "time"], p.dim, &["l2_norm"]));
    for (tr, path) in paths.iter().enumerate() {
        for k in 0..path.len() {
            let mut row = vec![tr.to_string(), fmt_f64(path.times[k])];
            row.extend(path.states[k].values().iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(path.l2_norm[k]));
            table.push(row);
        }
        warnings.extend(path.diagnostics.warnings.iter().map(|w| format!("trajectory {tr}: {w}")));
    }
    let times = &paths[0].times;
    let energy: Vec<_> = (0..times.len())
        .map(|k| {
            let e: Vec<f64> = paths.iter().map(|q| q.l2_norm[k] * q.l2_norm[k]).collect();
            (times[k], mean(&e), standard_error(&e))
        })
        .collect();
    let diagnostics: Vec<_> = paths.iter().map(|q| &q.diagnostics).collect();
    let body = json!({
        "dt": dt,
        "advective_cfl": adv,
        "noise_cfl": noise,
        "diagnostics": diagnostics,
        "warnings": warnings,
    });
    let summary = summary_value("simulate_sde", p, p.seed, body)?;
    table.write(&dir.join("results.csv"))?;
    write_dat(&dir.join("energy.dat"), "t vs E|X|^2", &energy)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(Outcome { checks: vec![], warnings })
}

/// Process exit status for a failed run.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        Error::Usage(_) | Error::Index(_) => 2,
        Error::BlowUp { .. } | Error::Range { .. } => 3,
        Error::Convergence { .. } | Error::Scheme(_) => 4,
    }
}
