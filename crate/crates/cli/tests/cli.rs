use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedtype(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedtype"))
        .args(args)
        .output()
        .expect("spawn fedtype")
}

const MINIMAL: &str = r#"
seed = 3
rounds = 2
clients = 2
sample_ratio = 1.0
proxy_hidden = [4]
private_pool = [[8]]

[dataset]
kind = "synthetic"
classes = 3
dim = 4
n_per_class = 60

[uarl]
local_epochs = 2
lr = 0.003
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn minimal_run_writes_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", MINIMAL);
    let out = dir.path().join("out");
    let o = fedtype(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], fedtype::runner::METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    let rows = fedtype::runner::read_metrics(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.round).collect::<Vec<_>>(), vec![1, 2]);

    assert!(out.join("checkpoints/round_1.params").exists());
    assert!(out.join("checkpoints/round_2.params").exists());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["rounds_completed"], 2);
    assert_eq!(summary["config"]["clients"], 2);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", MINIMAL);
    let out = dir.path().join("out");
    let o = fedtype(&["run", &cfg, "--seed", "11", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 11);
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", MINIMAL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(fedtype(&["run", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(fedtype(&["run", &cfg, "--out", b.to_str().unwrap(), "--parallel-clients", "2"]).status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn sweep_writes_one_metrics_file_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{}\n", MINIMAL.replace("rounds = 2", "rounds = 1\nsweep_modes = [\"full\", \"sym\", \"topk\", \"eta1\", \"g05\"]\ncheckpoints = false"));
    let cfg = write_config(dir.path(), "sweep.toml", &text);
    let out = dir.path().join("out");
    let o = fedtype(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for mode in ["full", "sym", "topk", "eta1", "g05"] {
        let rows = fedtype::runner::read_metrics(&out.join(mode).join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 1, "{mode}");
    }
}

#[test]
fn validate_accepts_reference_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ok.toml", MINIMAL);
    let o = fedtype(&["validate", &cfg]);
    assert!(o.status.success());
    assert!(o.stderr.is_empty());
}

#[test]
fn validate_names_bad_sample_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &MINIMAL.replace("sample_ratio = 1.0", "sample_ratio = 0.0"));
    let o = fedtype(&["validate", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sample_ratio"));
}

#[test]
fn validate_names_bad_theta_and_reports_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{}\n[conformal]\ntheta = 1.5\n", MINIMAL.replace("rounds = 2", "rounds = 0"));
    let cfg = write_config(dir.path(), "bad.toml", &text);
    let o = fedtype(&["validate", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("conformal.theta"), "{err}");
    assert!(err.contains("rounds"), "{err}");
}

#[test]
fn run_rejects_invalid_config_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &MINIMAL.replace("clients = 2", "clients = 0"));
    let out = dir.path().join("out");
    let o = fedtype(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("clients"));
    assert!(!out.exists());
}

#[test]
fn unreadable_config_fails() {
    let o = fedtype(&["validate", "/nonexistent/fedtype.toml"]);
    assert!(!o.status.success());
}

fn repo_configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_validate() {
    let mut seen = 0;
    for entry in fs::read_dir(repo_configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let o = fedtype(&["validate", path.to_str().unwrap()]);
            assert!(o.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&o.stderr));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}

#[test]
fn reference_config_lists_the_defaults() {
    let cfg = fedtype::config::RunConfig::load(repo_configs().join("reference.toml")).unwrap();
    assert_eq!(cfg, fedtype::config::RunConfig::default());
}
