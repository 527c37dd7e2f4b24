use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"{
    "dataset": {"synthetic": {"n_users": 120, "n_items": 400, "interactions_per_user": 15, "exponent": 1.2, "seed": 5}},
    "federation": {"epochs": 4, "seed": 21},
    "aggregator": {"kind": "median"},
    "attack": {"kind": "spattack-o-s", "malicious_ratio": 0.05, "max_poisoned_items": 30}
}"#;

fn fedrec(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fedrec")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str, out: &Path, label: &str) -> String {
    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    v["output"] = serde_json::json!({ "dir": out, "label": label });
    let path = dir.join(name);
    std::fs::write(&path, v.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn csv_is_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.json", SMALL, tmp.path(), "w");
    let mut outputs = Vec::new();
    for workers in ["1", "4"] {
        let out = fedrec(&["--workers", workers, "run", "--config", &cfg]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let csv = std::fs::read(tmp.path().join("w.csv")).unwrap();
        let audit = std::fs::read(tmp.path().join("w.audit.csv")).unwrap();
        outputs.push((csv, audit));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0].0.clone()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,hr5,ndcg5,hr10,ndcg10,diverged");
    assert_eq!(lines.len(), 1 + 4);
}

#[test]
fn seed_flag_and_clean_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let clean_text = SMALL.replace("spattack-o-s", "none");
    let clean = write_config(tmp.path(), "clean.json", &clean_text, tmp.path(), "clean");
    assert!(fedrec(&["run", "--config", &clean]).status.success());
    let attacked = write_config(tmp.path(), "att.json", SMALL, tmp.path(), "att");
    let baseline = tmp.path().join("clean.summary.json");
    let out = fedrec(&[
        "run",
        "--config",
        &attacked,
        "--seed",
        "21",
        "--clean-baseline",
        baseline.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("att.summary.json")).unwrap()).unwrap();
    let hr = summary["final"]["hr10"].as_f64().unwrap();
    let clean_hr = summary["clean_baseline"]["hr10"].as_f64().unwrap();
    let drop = summary["drop"]["hr10"].as_f64().unwrap();
    assert!((drop - (hr - clean_hr) / clean_hr).abs() < 1e-12);
    assert_eq!(summary["malicious_count"], 6);
    assert_eq!(summary["config"]["federation"]["seed"], 21);
    assert!(summary["audit_totals"]["attacked_rounds"].as_u64().unwrap() == 4);

    // a different seed gives a different run
    let out = fedrec(&["run", "--config", &attacked, "--seed", "22"]);
    assert!(out.status.success());
    let other: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("att.summary.json")).unwrap()).unwrap();
    assert_eq!(other["config"]["federation"]["seed"], 22);
}

#[test]
fn invalid_config_fails_with_key_path() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"attack": {"malicious_ratio": 1.2}}"#).unwrap();
    let out = fedrec(&["run", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("attack.malicious_ratio"));
}

#[test]
fn analyze_and_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.json", SMALL, tmp.path(), "x");
    let out = fedrec(&["analyze", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# exponent="));
    assert_eq!(lines.next().unwrap(), "alpha,malicious_count,predicted,empirical");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0][2..], [0.0, 0.0]);
    for w in rows.windows(2) {
        assert!(w[0][2] <= w[1][2] && w[0][3] <= w[1][3]);
    }

    let out = fedrec(&["stats", "--config", &cfg]);
    assert!(out.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["n_users"], 120);
    assert_eq!(stats["interactions"], 120 * 15);
}
