//! `dyadic-lab <subcommand> --config <path> [--seed N] [--workers K] [--out DIR]`
//!
//! Exit status: 0 success, 1 i/o, 2 validation, 3 blow-up, 4 convergence or scheme failure.

mod config;
mod dispatch;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use dyadic_core::experiments::Check;
use dyadic_core::io::{write_json, SCHEMA_VERSION};
use serde_json::json;

use config::{parse_config, resolve, resolve_seed, Command, SEED_ENV};
use dispatch::{dispatch, exit_code};

const EXIT_IO: u8 = 1;
const EXIT_VALIDATION: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "dyadic-lab", version, about = "Deterministic and stochastic dyadic shell model runs")]
struct Cli {
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the DYADIC_LAB_SEED variable and the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides `output_dir` in the file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(run(&cli))
}

fn run(cli: &Cli) -> u8 {
    let fallback_dir = cli.out.clone();
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", cli.config.display());
            return EXIT_IO;
        }
    };
    let file = match parse_config(&text, cli.command) {
        Ok(f) => f,
        Err(errors) => return fail(cli, fallback_dir.as_deref(), None, &errors, EXIT_VALIDATION),
    };
    let env = std::env::var(SEED_ENV).ok();
    let seed = match resolve_seed(cli.seed, env.as_deref(), file.seed) {
        Ok(s) => s,
        Err(e) => {
            let dir = fallback_dir.or(file.output_dir.clone());
            return fail(cli, dir.as_deref(), None, &[e], EXIT_VALIDATION);
        }
    };
    let cfg = resolve(cli.command, file, seed, cli.out.clone());
    if let Some(k) = cli.workers {
        if k == 0 {
            return fail(cli, Some(&cfg.output_dir), Some(seed), &["workers must be at least 1".into()], EXIT_VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("warning: worker pool: {e}");
        }
    }
    match dispatch(&cfg) {
        Ok(outcome) => {
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            report(&outcome.checks);
            println!("wrote {}", cfg.output_dir.display());
            0
        }
        Err(e) => {
            let code = exit_code(&e);
            let doc = json!({
                "schema_version": SCHEMA_VERSION,
                "tool_version": env!("CARGO_PKG_VERSION"),
                "command": cli.command.name(),
                "seed": seed,
                "config": cfg.params.to_json(),
                "errors": [e.to_string()],
                "exit_code": code,
            });
            write_failure(&cfg.output_dir, &doc);
            eprintln!("error: {e}");
            code
        }
    }
}

fn report(checks: &[Check]) {
    for c in checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
}

fn fail(cli: &Cli, dir: Option<&Path>, seed: Option<u64>, errors: &[String], code: u8) -> u8 {
    for e in errors {
        eprintln!("error: {e}");
    }
    if let Some(dir) = dir {
        let doc = json!({
            "schema_version": SCHEMA_VERSION,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "command": cli.command.name(),
            "seed": seed,
            "config": null,
            "errors": errors,
            "exit_code": code,
        });
        write_failure(dir, &doc);
    }
    code
}

fn write_failure(dir: &Path, doc: &serde_json::Value) {
    if let Err(e) = write_json(&dir.join("summary.json"), doc) {
        eprintln!("error: could not record the failure: {e}");
    }
}
