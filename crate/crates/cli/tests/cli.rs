use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_dyadic-lab");

struct Run {
    out: Output,
    dir: PathBuf,
}

impl Run {
    fn code(&self) -> i32 {
        self.out.status.code().unwrap_or(-1)
    }

    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.out.stderr).into_owned()
    }

    fn summary(&self) -> Value {
        serde_json::from_str(&fs::read_to_string(self.dir.join("summary.json")).unwrap()).unwrap()
    }

    fn file(&self, name: &str) -> Vec<u8> {
        fs::read(self.dir.join(name)).unwrap()
    }
}

fn run(root: &Path, sub: &str, config: &str, extra: &[&str], env_seed: Option<&str>) -> Run {
    static COUNTER: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);
    let k = COUNTER.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
    let cfg = root.join(format!("cfg{k}.toml"));
    fs::write(&cfg, config).unwrap();
    let dir = root.join(format!("out{k}"));
    let mut cmd = Command::new(BIN);
    cmd.arg(sub).arg("--config").arg(&cfg).arg("--out").arg(&dir).args(extra);
    cmd.env_remove("DYADIC_LAB_SEED");
    if let Some(s) = env_seed {
        cmd.env("DYADIC_LAB_SEED", s);
    }
    Run { out: cmd.output().unwrap(), dir }
}

const SMALL_SDE: &str = "[parameters]\ndim = 6\nt_end = 0.05\ndt = 0.001\ntrajectories = 4\n";

#[test]
fn minimal_simulate_det_writes_all_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let r = run(root.path(), "simulate-det", "[parameters]\ndim = 6\nt_end = 0.1\n", &[], None);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let s = r.summary();
    assert_eq!(s["schema_version"], 1);
    assert_eq!(s["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(s["config"]["dim"], 6);
    assert_eq!(s["config"]["nu"], 1.0);
    assert!(s["energy_residual"].as_f64().unwrap().abs() < 1e-3);
    let csv = String::from_utf8(r.file("results.csv")).unwrap();
    assert!(csv.starts_with("time,x_1,x_2,x_3,x_4,x_5,x_6,l2_norm,h_alpha_norm\r\n"));
    assert!(r.dir.join("energy.dat").exists());
}

#[test]
fn rerun_is_byte_identical_and_worker_independent() {
    let root = tempfile::tempdir().unwrap();
    let a = run(root.path(), "simulate-sde", SMALL_SDE, &["--seed", "11"], None);
    let b = run(root.path(), "simulate-sde", SMALL_SDE, &["--seed", "11"], None);
    let c = run(root.path(), "simulate-sde", SMALL_SDE, &["--seed", "11", "--workers", "1"], None);
    let d = run(root.path(), "simulate-sde", SMALL_SDE, &["--seed", "12"], None);
    for r in [&a, &b, &c, &d] {
        assert_eq!(r.code(), 0, "{}", r.stderr());
    }
    assert_eq!(a.file("results.csv"), b.file("results.csv"));
    assert_eq!(a.file("results.csv"), c.file("results.csv"));
    assert_ne!(a.file("results.csv"), d.file("results.csv"));
}

#[test]
fn seed_precedence_flag_env_file() {
    let root = tempfile::tempdir().unwrap();
    let cfg = format!("seed = 3\n{SMALL_SDE}");
    let file_only = run(root.path(), "simulate-sde", &cfg, &[], None);
    let env = run(root.path(), "simulate-sde", &cfg, &[], Some("5"));
    let flag = run(root.path(), "simulate-sde", &cfg, &["--seed", "7"], Some("5"));
    assert_eq!(file_only.summary()["seed"], 3);
    assert_eq!(env.summary()["seed"], 5);
    assert_eq!(flag.summary()["seed"], 7);
    assert_eq!(flag.summary()["config"]["seed"], 7);
    let bad = run(root.path(), "simulate-sde", &cfg, &[], Some("abc"));
    assert_eq!(bad.code(), 2);
}

#[test]
fn dt_above_cfl_audit_warns_and_proceeds() {
    let root = tempfile::tempdir().unwrap();
    let r = run(root.path(), "simulate-sde", "[parameters]\ndim = 8\nt_end = 0.1\ndt = 0.01\n", &[], None);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let w = r.summary()["warnings"].as_array().unwrap().clone();
    assert!(w.iter().any(|v| v.as_str().unwrap().contains("CFL")), "{w:?}");
    assert!(r.dir.join("results.csv").exists());
}

#[test]
fn scaling_with_two_families_is_a_validation_error() {
    let root = tempfile::tempdir().unwrap();
    let cfg = "[parameters]\nfamilies = [{ kind = \"uniform\", n = 4 }, { kind = \"uniform\", n = 8 }]\n";
    let r = run(root.path(), "exp-scaling", cfg, &[], None);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("at least 3 families"));
    let names: Vec<_> = fs::read_dir(&r.dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("summary.json")]);
    assert_eq!(r.summary()["exit_code"], 2);
}

#[test]
fn clt_rejects_alpha1_outside_range() {
    let root = tempfile::tempdir().unwrap();
    let r = run(root.path(), "exp-clt", "[parameters]\nalpha1 = 0.7\n", &[], None);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("α₁ ∈ (0, 1/2)"));
    let errs = r.summary()["errors"].to_string();
    assert!(errs.contains("α₁ ∈ (0, 1/2)"));
}

#[test]
fn girsanov_rejects_vanishing_first_coefficient() {
    let root = tempfile::tempdir().unwrap();
    let cfg = "[parameters]\ntheta = { kind = \"custom\", coefficients = [0.0, 1.0], normalize = false }\n";
    let r = run(root.path(), "girsanov-check", cfg, &[], None);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("theta_1 != 0"));
}

#[test]
fn every_violation_is_listed() {
    let root = tempfile::tempdir().unwrap();
    let cfg = "[parameters]\nkappa = -1.0\nrho = 2.0\nsamples = 1\n";
    let r = run(root.path(), "exp-dissipation", cfg, &[], None);
    assert_eq!(r.code(), 2);
    assert_eq!(r.summary()["errors"].as_array().unwrap().len(), 3, "{}", r.stderr());
}

#[test]
fn unknown_keys_and_syntax_errors_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let r = run(root.path(), "exp-corrector", "[parameters]\nlamda = 2.0\n", &[], None);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("parameters.lamda"));
    let r = run(root.path(), "exp-corrector", "verbose = true\n", &[], None);
    assert_eq!(r.code(), 2);
    let r = run(root.path(), "exp-corrector", "[parameters]\nns = [4,\n", &[], None);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("line"));
}

#[test]
fn blow_up_exit_code() {
    let root = tempfile::tempdir().unwrap();
    let r = run(root.path(), "simulate-det", "[parameters]\nx0 = [1e3]\nt_end = 1.0\ndt = 0.1\n", &[], None);
    assert_eq!(r.code(), 3, "{}", r.stderr());
    assert!(!r.dir.join("results.csv").exists());
    assert!(r.summary()["errors"][0].as_str().unwrap().contains("blow-up"));
}

#[test]
fn missing_config_is_an_io_error() {
    let out = Command::new(BIN).args(["exp-corrector", "--config", "/nonexistent/cfg.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrector_experiment_passes_its_checks() {
    let root = tempfile::tempdir().unwrap();
    let r = run(root.path(), "exp-corrector", "", &[], None);
    assert_eq!(r.code(), 0);
    let stdout = String::from_utf8_lossy(&r.out.stdout).into_owned();
    assert!(stdout.contains("PASS") && !stdout.contains("FAIL"), "{stdout}");
    let checks = r.summary()["checks"].as_array().unwrap().clone();
    assert!(checks.iter().all(|c| c["pass"] == true));
}

#[test]
fn small_moment_run_writes_mass_column() {
    let root = tempfile::tempdir().unwrap();
    let cfg = "[parameters]\ndim = 4\nsamples = 0\nt_end = 0.1\ndt_moments = 0.01\ndt_paths = 0.01\ncheckpoints = [0.1]\n";
    let r = run(root.path(), "moments", cfg, &[], None);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let csv = String::from_utf8(r.file("results.csv")).unwrap();
    assert!(csv.starts_with("time,y_1,y_2,y_3,y_4,total_mass\r\n"));
}
