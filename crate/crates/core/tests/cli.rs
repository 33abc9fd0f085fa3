use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctpo-lab"))
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let status = bin()
        .arg("run")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("binary runs");
    status.status.code().expect("exit code")
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn write_config(dir: &TempDir, text: &str) -> PathBuf {
    let path = dir.path().join("config.json");
    fs::write(&path, text).unwrap();
    path
}

const SMALL_VERIFY: &str = r#"{
  "experiment": "verify-unbiasedness",
  "seed": 3,
  "params": {"battery": {"instances": 6, "vocab_sizes": [2, 3], "horizons": [2, 3]}}
}"#;

#[test]
fn default_verification_passes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&shipped("verify-unbiasedness.json"), &out, &[]), 0);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["passed"], Value::Bool(true));
    let errs = &report["results"]["battery"]["max_abs_error_by_mode"];
    assert!(errs["cumulative"].as_f64().unwrap() < 1e-10);
    assert!(errs["sequence"].as_f64().unwrap() < 1e-10);
    assert_eq!(
        files(&out),
        ["manifest.json", "report.json", "unbiasedness.csv"]
    );
}

#[test]
fn variance_scan_columns_agree() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&shipped("variance-scan.json"), &out, &[]), 0);
    let mut reader = csv::Reader::from_path(out.join("variance_scan.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (e, c) = (col("enumerated_ratio"), col("closed_form_ratio"));
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let enumerated: f64 = rec[e].parse().unwrap();
        let closed: f64 = rec[c].parse().unwrap();
        assert!((enumerated - closed).abs() < 1e-8);
        rows += 1;
    }
    assert_eq!(rows, 4 * (1..=8).sum::<usize>());
}

#[test]
fn malformed_config_exits_2_with_only_an_error_report() {
    for text in [
        "{ not json",
        r#"{"experiment": "verify-unbiasedness", "colour": 1, "params": {}}"#,
        r#"{"experiment": "no-such-experiment"}"#,
        r#"{"experiment": "clip-rate", "params": {"horizon": 4, "samples": 10, "log_ratio_std": 0.1,
            "adaptive": {"mode": "adaptive_log", "eps_low": 0.1, "eps_high": 0.1, "p": 0.5}, "extra": true}}"#,
        r#"{"experiment": "train", "params": {"objective": {"kind": "grpo", "eps": 0.2}, "group_size": 1,
            "learning_rate": 0.1, "total_steps": 1, "mdp": {"vocab_size": 2, "horizon": 2, "reward": {"kind": "constant", "value": 0}}}}"#,
    ] {
        let tmp = TempDir::new().unwrap();
        let config = write_config(&tmp, text);
        let out = tmp.path().join("out");
        assert_eq!(run(&config, &out, &[]), 2, "{text}");
        assert_eq!(files(&out), ["error.json"], "{text}");
        assert_eq!(read_json(&out.join("error.json"))["exit_code"], 2);
    }
}

#[test]
fn failed_assertion_exits_1() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(&tmp, &SMALL_VERIFY.replace("\"seed\": 3", "\"seed\": 3, \"threads\": 2").replace(
        "\"horizons\": [2, 3]}",
        "\"horizons\": [2, 3]}, \"tolerance\": 1e-300",
    ));
    let out = tmp.path().join("out");
    assert_eq!(run(&config, &out, &[]), 1);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["passed"], Value::Bool(false));
    assert_eq!(read_json(&out.join("manifest.json"))["exit_code"], 1);
}

#[test]
fn io_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(run(&tmp.path().join("missing.json"), &tmp.path().join("out"), &[]), 3);
    let config = write_config(&tmp, SMALL_VERIFY);
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    assert_eq!(run(&config, &blocker.join("out"), &[]), 3);
}

fn artifact_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    files(dir)
        .into_iter()
        .filter(|f| f != "manifest.json")
        .map(|f| {
            let bytes = fs::read(dir.join(&f)).unwrap();
            (f, bytes)
        })
        .collect()
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    for name in ["clip-rate.json", "train-ctpo.json", "chi2-factorization.json"] {
        let a = tmp.path().join(format!("{name}-a"));
        let b = tmp.path().join(format!("{name}-b"));
        assert_eq!(run(&shipped(name), &a, &[]), 0);
        assert_eq!(run(&shipped(name), &b, &[]), 0);
        assert_eq!(artifact_bytes(&a), artifact_bytes(&b), "{name}");
        let mut ma = read_json(&a.join("manifest.json"));
        let mut mb = read_json(&b.join("manifest.json"));
        for m in [&mut ma, &mut mb] {
            let obj = m.as_object_mut().unwrap();
            obj.remove("started_unix_ms");
            obj.remove("wall_time_seconds");
        }
        assert_eq!(ma, mb);
    }
}

#[test]
fn thread_count_does_not_change_artifacts() {
    let tmp = TempDir::new().unwrap();
    for name in ["log-std-profile.json", "train-ctpo.json", "verify-unbiasedness.json"] {
        let one = tmp.path().join(format!("{name}-1"));
        let four = tmp.path().join(format!("{name}-4"));
        assert_eq!(run(&shipped(name), &one, &["--threads", "1"]), 0);
        assert_eq!(run(&shipped(name), &four, &["--threads", "4"]), 0);
        assert_eq!(artifact_bytes(&one), artifact_bytes(&four), "{name}");
        assert_eq!(read_json(&four.join("manifest.json"))["threads"], 4);
    }
}

#[test]
fn manifest_records_resolved_config_and_overrides() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(&tmp, SMALL_VERIFY);
    let out = tmp.path().join("out");
    assert_eq!(run(&config, &out, &["--seed", "99"]), 0);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["config"]["seed"], 99);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    // defaults are filled in
    let battery = &manifest["config"]["params"]["battery"];
    assert_eq!(battery["policy_std"], 1.0);
    assert_eq!(battery["parametrization"], "prefix");
    assert_eq!(manifest["config"]["params"]["tolerance"], 1e-10);
    assert!(manifest["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(read_json(&out.join("report.json"))["seed"], 99);
}

#[test]
fn training_writes_a_step_stream() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&shipped("train-ctpo.json"), &out, &[]), 0);
    let text = fs::read_to_string(out.join("train_steps.jsonl")).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 200);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i);
        let c = l["clip_fraction"].as_f64().unwrap();
        assert!((0.0..=0.5).contains(&c));
    }
}
