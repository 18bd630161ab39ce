use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delay-mfg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn validate_shipped_models() {
    for name in ["case1.json", "delayed.json", "case2.json"] {
        let dir = tempfile::tempdir().unwrap();
        let m = model(name);
        let o = run(&["validate", "--model", m.to_str().unwrap(), "--out", &out_arg(dir.path())]);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("validation.json")).unwrap()).unwrap();
        assert_eq!(report["ok"], true);
        assert!(dir.path().join("manifest.json").exists());
    }
}

#[test]
fn case2_writes_costate_table() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("case2.json");
    let o = run(&["case2", "--model", m.to_str().unwrap(), "--out", &out_arg(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("case2.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,interval,ybar,ybar_shifted,control"));
    assert_eq!(lines.count(), 17);
}

#[test]
fn bad_config_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": "x.json", "unknown_key": 1}"#).unwrap();
    let o = run(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["validate", "--model", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grid_not_dividing_delay_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("case1.json");
    let o = run(&["nce", "--model", m.to_str().unwrap(), "--grid-h", "0.3", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn case1_only_commands_reject_delayed_dynamics() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("delayed.json");
    let o = run(&["rate-scan", "--model", m.to_str().unwrap(), "--reps", "8", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn oracle_check_passes_on_coarse_grid() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("delayed.json");
    let o = run(&["oracle-check", "--model", m.to_str().unwrap(), "--grid-h", "0.25", "--out", &out_arg(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("tree.json").exists());
}

#[test]
fn config_file_and_flags_merge() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let m = model("case1.json");
    std::fs::write(
        &cfg,
        serde_json::json!({"model": m, "seed": 7, "reps": 5, "n_list": [2, 3]}).to_string(),
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", &out_arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["config"]["reps"], 5);
    assert_eq!(manifest["model_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn rate_scan_is_reproducible_across_execution_modes() {
    let dir = tempfile::tempdir().unwrap();
    let m = model("case1.json");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let common = ["rate-scan", "--model", m.to_str().unwrap(), "--reps", "64", "--n-list", "4,8,16,32"];
    let o = run(&[&common[..], &["--out", &out_arg(&a)]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&[&common[..], &["--out", &out_arg(&b), "--sequential"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["rate_scan.csv", "rate_fits.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let fits = std::fs::read_to_string(a.join("rate_fits.csv")).unwrap();
    assert!(fits.starts_with("statistic,slope,intercept,r2"));
}
