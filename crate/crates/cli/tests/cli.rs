use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn bsvie(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsvie")).args(args).env("BSVIE_OUTPUT_ROOT", root).output().expect("spawn bsvie")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn solve_zero_preset_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "zero.toml", "[problem]\npreset = \"zero\"\n[grids]\nM = 10\n");
    let out = tmp.path().join("run");
    let o = bsvie(&["solve", &cfg, "--out", out.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "meta.json", "summary.txt", "picard_trace.csv", "y0.csv", "diagonal.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let r = report(&out);
    assert_eq!(r["status"], "converged");
    assert_eq!(r["results"]["picard"]["value"]["iterations"], 1);
}

#[test]
fn output_root_env_sets_default_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "zero.toml", "[problem]\npreset = \"zero\"\n[grids]\nM = 5\n[output]\ndirectory = \"nested\"\n");
    let o = bsvie(&["solve", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(tmp.path().join("nested/report.json").is_file());
}

#[test]
fn forced_non_convergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "exp.toml", "[problem]\npreset = \"exp_diag\"\n[grids]\nM = 20\n[picard]\nmax_iter = 1\n");
    let out = tmp.path().join("run");
    let o = bsvie(&["solve", &cfg, "--out", out.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let r = report(&out);
    assert_eq!(r["exit_code"], 2);
    assert_eq!(r["results"]["picard"]["value"]["trace"].as_array().unwrap().len(), 1);
}

#[test]
fn bad_config_exits_one_and_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "[problem]\npreset = \"zero\"\n[mc]\nn_pathz = 10\n");
    let o = bsvie(&["check", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_pathz"));

    let cfg = write(tmp.path(), "empty.toml", "[problem]\n");
    let o = bsvie(&["solve", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("problem.preset or problem.f required"));
}

#[test]
fn check_and_presets_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "sin.toml", "[problem]\npreset = \"sin_nonlinear\"\n");
    let o = bsvie(&["check", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("x grid") && text.ends_with("ok\n"), "{text}");

    let o = bsvie(&["presets"], tmp.path());
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["zero", "exp_diag", "brownian_identity", "linear_z", "wy_vs_bkm_controlfree", "sin_nonlinear"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name}");
    }
    let o = bsvie(&["presets", "exp_diag"], tmp.path());
    assert!(String::from_utf8_lossy(&o.stdout).contains("f = \"u\""));
    assert_eq!(bsvie(&["presets", "nope"], tmp.path()).status.code(), Some(1));
}

#[test]
fn study_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "exp.toml", "[problem]\npreset = \"exp_diag\"\n");
    let out = tmp.path().join("study");
    let o = bsvie(&["study", &cfg, "--ladder", "M=20,40,80", "--out", out.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rungs = std::fs::read_to_string(out.join("study.csv")).unwrap();
    assert_eq!(rungs.lines().count(), 4);
    assert!(out.join("study_orders.csv").is_file());
    assert_eq!(bsvie(&["study", &cfg, "--ladder", "Q=1,2"], tmp.path()).status.code(), Some(1));
}
