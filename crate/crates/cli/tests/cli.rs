use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedsfr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fedsfr")
}

fn default_config() -> serde_json::Value {
    let out = run(&["default-config"]);
    assert!(out.status.success());
    serde_json::from_slice(&out.stdout).expect("default config is JSON")
}

fn write_config(dir: &Path, name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut cfg = default_config();
    cfg["T"] = 3.into();
    edit(&mut cfg);
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_metrics_and_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "desk.json", |_| {});
    let out_dir = dir.path().join("out");
    let out = run(&["run", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let jsonl = fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert!(jsonl.lines().count() >= 4);
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["psnr_db"].is_number());
    }
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), jsonl.lines().count() + 1);
    let ckpt = fs::read(out_dir.join("model.fsfr")).unwrap();
    assert_eq!(&ckpt[..4], b"FSFR");
}

#[test]
fn metrics_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "desk.json", |c| c["seed"] = 11.into());
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "1", "4"].iter().enumerate() {
        let out_dir = dir.path().join(format!("out{i}"));
        let out = run(&["run", "--config", s(&cfg), "--out", s(&out_dir), "--threads", threads]);
        assert!(out.status.success());
        outputs.push((fs::read(out_dir.join("metrics.jsonl")).unwrap(), fs::read(out_dir.join("model.fsfr")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn compare_emits_one_row_per_config() {
    let dir = TempDir::new().unwrap();
    let a = write_config(dir.path(), "fedsfr.json", |_| {});
    let b = write_config(dir.path(), "fedavg.json", |c| c["mode"] = "baseline".into());
    let out_dir = dir.path().join("cmp");
    let out = run(&["compare", "--configs", s(&a), s(&b), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(out_dir.join("summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][1], "fedsfr");
    assert_eq!(&rows[1][1], "baseline");
    assert!(out_dir.join("0-fedsfr/metrics.jsonl").exists());
    assert!(out_dir.join("1-fedavg/metrics.jsonl").exists());
}

#[test]
fn selftest_passes() {
    let out = run(&["selftest"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("0 failed"), "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn diag_reports_contraction() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "desk.json", |_| {});
    let out = run(&["diag", "--config", s(&cfg), "--trials", "200"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let nu = v["nu_hat_top_s"].as_f64().unwrap();
    assert!(nu > 0.0 && nu <= 1.0);
    assert_eq!(v["feature_width"], 32);
}

#[test]
fn invalid_input_exits_with_one() {
    let dir = TempDir::new().unwrap();
    let missing = write_config(dir.path(), "missing.json", |c| {
        c.as_object_mut().unwrap().remove("K");
    });
    let unknown = write_config(dir.path(), "unknown.json", |c| c["eta"] = 0.1.into());
    let oversubscribed = write_config(dir.path(), "over.json", |c| c["K_o"] = 9.into());
    let out_dir = dir.path().join("out");
    for (cfg, needle) in [(&missing, "K"), (&unknown, "eta"), (&oversubscribed, "K")] {
        let out = run(&["run", "--config", s(cfg), "--out", s(&out_dir)]);
        assert_eq!(out.status.code(), Some(1), "{}", cfg.display());
        assert!(String::from_utf8_lossy(&out.stderr).contains(needle));
    }
    let out = run(&["run", "--config", s(&dir.path().join("nope.json")), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["run"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn warns_when_server_rate_exceeds_client_rate() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "hot.json", |c| {
        c["eta_s0"] = 1.0.into();
        c["T"] = 1.into();
    });
    let out = run(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}
