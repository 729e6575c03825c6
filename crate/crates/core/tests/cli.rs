use std::fs;
use std::path::Path;
use std::process::Command;

fn dipsgnn(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dipsgnn")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn test_rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("report.csv")).unwrap().lines().filter(|l| l.contains(",test,")).map(String::from).collect()
}

#[test]
fn calibrate_prints_sigma() {
    let text = dipsgnn(&["calibrate", "--epsilon2", "5", "--delta", "1e-5"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!((v["sigma"].as_f64().unwrap() - 1.054534).abs() < 1e-6, "{text}");
    assert_eq!(v["T"], 1);
}

#[test]
fn synth_train_evaluate_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_owned();
    dipsgnn(&["synth", "--users", "30", "--items", "20", "--length", "10", "--seed", "1", "--out-dir", &p("data")]);
    for f in ["interactions.csv", "users.csv", "config.toml"] {
        assert!(tmp.path().join("data").join(f).exists(), "{f}");
    }
    let config = p("data/config.toml");
    let small = ["--config", &config, "--epochs", "2", "--item-dim", "8", "--user-dim", "4"];

    dipsgnn(&[&["train"][..], &small, &["--seed", "1", "--out-dir", &p("train")]].concat());
    let train = tmp.path().join("train");
    for f in ["checkpoint_seed1.json", "train_log_seed1.jsonl", "report.csv", "summary.csv", "provenance.json", "config.toml"] {
        assert!(train.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(train.join("train_log_seed1.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"train\"")).count(), 2);

    // Re-evaluating the checkpoint reproduces the training run's test rows.
    let checkpoint = p("train/checkpoint_seed1.json");
    dipsgnn(&[&["evaluate"][..], &small, &["--checkpoint", &checkpoint, "--seed", "1", "--out-dir", &p("eval")]].concat());
    assert_eq!(test_rows(&train), test_rows(&tmp.path().join("eval")));

    let summary = dipsgnn(&[&["sweep"][..], &small, &["--seed", "1,2", "--out-dir", &p("sweep")]].concat());
    assert!(summary.contains("2 seeds"), "{summary}");
    assert_eq!(fs::read_dir(tmp.path().join("sweep/logs")).unwrap().count(), 2);
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_dipsgnn")).args(["calibrate", "--epsilon2", "-1", "--delta", "1e-5"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon2"));
}
