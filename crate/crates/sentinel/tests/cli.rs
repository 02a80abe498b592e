//! End-to-end runs of the `sentinel` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn sentinel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sentinel"))
        .args(args)
        .env_remove("SENTINEL_MODEL_URL")
        .env_remove("SENTINEL_MODEL_API_KEY")
        .output()
        .unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON error in {stderr}"));
    serde_json::from_str(line).unwrap()
}

fn scan(out: &Path, pipeline: &str, extra: &[&str]) -> Value {
    let manifest = fixtures().join("reflection/manifest.jsonl");
    let mut args = vec!["scan", manifest.to_str().unwrap(), "--pipeline", pipeline, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = sentinel(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn scan_and_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let replay = format!("reflect=replay:{}", fixtures().join("reflection/replay").display());
    let a = dir.path().join("a");
    let manifest = scan(&a, "detect_then_reflect", &["--backend", &replay]);
    assert_eq!(manifest["pipeline"], "detect_then_reflect");

    let report_dir = dir.path().join("report");
    let o = sentinel(&["evaluate", a.to_str().unwrap(), "--out", report_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("0.857"), "{text}");
    assert!(report_dir.join("report.json").is_file());
    assert!(report_dir.join("report.txt").is_file());

    // Comparing a scan with itself yields zero deltas.
    let o = sentinel(&["evaluate", a.to_str().unwrap(), "--compare", a.to_str().unwrap(), "--out", report_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    let comparisons = report["comparisons"].as_array().unwrap();
    assert!(!comparisons.is_empty());
    for cmp in comparisons {
        for row in cmp["rows"].as_array().unwrap() {
            for key in ["precision", "recall", "f1"] {
                assert_eq!(row["delta"][key].as_f64().unwrap(), 0.0, "{cmp}");
            }
        }
    }
}

#[test]
fn missing_gold_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    scan(&a, "pattern_only", &[]);
    let o = sentinel(&["evaluate", a.to_str().unwrap(), "--gold", "/nonexistent/gold.jsonl"]);
    assert!(!o.status.success());
    let err = error_json(&o);
    assert_eq!(err["error"]["kind"], "NotFound", "{err}");
}

#[test]
fn missing_backend_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures().join("reflection/manifest.jsonl");
    let o = sentinel(&["scan", manifest.to_str().unwrap(), "--pipeline", "detect_then_reflect", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["error"]["message"].as_str().unwrap().contains("reflect"));
}

#[test]
fn bad_config_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sentinel.toml");
    std::fs::write(&config, "pipeline = \"retrieve_then_detect\"\nunknown_key = 1\n").unwrap();
    let o = sentinel(&["--config", config.to_str().unwrap(), "rules", "validate", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rules_validate_reports_counts() {
    let books = fixtures().join("humanitarian/rulebooks");
    let o = sentinel(&[
        "rules",
        "validate",
        books.join("ke.json").to_str().unwrap(),
        books.join("default.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["country"], "KE");
    assert_eq!(v[0]["rules"]["severe_sensitive"], 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"country\": \"KE\"}").unwrap();
    let o = sentinel(&["rules", "validate", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(error_json(&o)["error"]["message"].is_string());
}

#[test]
fn configured_corpus_scans_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixtures().join("humanitarian/sentinel.toml");
    let manifest = fixtures().join("humanitarian/manifest.jsonl");
    let o = sentinel(&[
        "--config",
        config.to_str().unwrap(),
        "scan",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = sentinel(&["evaluate", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
