use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use digan_core::cohort::{load_cohort, CohortFormat, CohortSpec, Label};
use serde_json::json;

fn digan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_digan"))
        .args(args)
        .env("DIGAN_LOG", "warn")
        .output()
        .expect("spawn digan")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path, seed: u64) -> PathBuf {
    let spec = CohortSpec::with_severity(5, &[(Label::NO, 10, 10, 0.0, 0.05), (Label::AD, 10, 10, 2.0, 0.5)]);
    let config = json!({
        "seed": seed,
        "task": "no-vs-ad",
        "cohort": { "spec": spec },
        "out": "run",
        "fidelity_samples": 200,
        "diffusion": {
            "schedule": { "steps": 20, "beta_start": 1e-4, "beta_end": 0.1 },
            "hidden": [16],
            "epochs": 3
        },
        "classifier": { "channels": [2, 4], "d_a": 4 },
        "loss": { "epochs": 3, "batch_size": 16 }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn generate_table1_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cohort.csv");
    let o = digan(&[
        "generate",
        "--preset",
        "table1",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(
        stdout(&o).contains("687 subjects: 255 NO / 96 MCI / 336 AD"),
        "{}",
        stdout(&o)
    );
    let cohort = load_cohort(&out, CohortFormat::Csv).unwrap();
    assert_eq!(cohort.count(Label::NO), 255);
    assert_eq!(cohort.count(Label::MCI), 96);
    assert_eq!(cohort.count(Label::AD), 336);
}

#[test]
fn generate_from_empty_spec_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = CohortSpec::table1(0);
    spec.classes.clear();
    let spec_path = dir.path().join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let out = dir.path().join("empty.jsonl");
    let o = digan(&[
        "generate",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("0 subjects"));
    assert!(out.exists());
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{ \"seed\": 0, ").unwrap();
    let o = digan(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_cohort_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    fs::write(&path, r#"{ "seed": 0, "cohort": { "path": "nowhere.csv" } }"#).unwrap();
    let o = digan(&["evaluate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
}

#[test]
fn train_evaluate_and_corrupted_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 1);
    let c = config.to_str().unwrap();

    let o = digan(&["train", "--config", c]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    for f in [
        "training_log.json",
        "synthetic.csv",
        "checkpoints/denoiser.json",
        "checkpoints/sacnet.bin",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }

    let o = digan(&["evaluate", "--config", c]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "report.json",
        "roc.csv",
        "pr.csv",
        "embeddings.csv",
        "fidelity.json",
        "correlation_difference.csv",
        "pca.csv",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);

    let blob = run.join("checkpoints/sacnet.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    let o = digan(&["evaluate", "--config", c]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn incompatible_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 2);
    let c = config.to_str().unwrap();
    assert!(digan(&["train", "--config", c]).status.success());

    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    v["classifier"]["channels"] = json!([2, 8]);
    fs::write(&config, v.to_string()).unwrap();
    let o = digan(&["evaluate", "--config", c]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 4);
    let c = config.to_str().unwrap();
    let synthetic_path = dir.path().join("run/synthetic.csv");
    let s = synthetic_path.to_str().unwrap();
    for args in [
        vec!["train-diffusion", "--config", c],
        vec!["synthesize", "--config", c],
        vec!["train-classifier", "--config", c, "--synthetic", s],
    ] {
        let o = digan(&args);
        assert!(
            o.status.success(),
            "{}: {}",
            args[0],
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let synthetic = load_cohort(&synthetic_path, CohortFormat::Csv).unwrap();
    assert!(!synthetic.is_empty());
    assert!(dir.path().join("run/classifier_log.json").exists());
    assert!(digan(&["evaluate", "--config", c]).status.success());
}

#[test]
fn report_over_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 0);
    let o = digan(&["report", "--config", config.to_str().unwrap(), "--seeds", "0,1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mean over 2 seeds"));
    let run = dir.path().join("run");
    assert!(run.join("seed-0/report.json").exists());
    assert!(run.join("seed-1/report.json").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], json!([0, 1]));
}
