use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tico(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tico"))
        .args(args)
        .output()
        .expect("binary runs")
}

const QUICK: [&str; 10] = [
    "--set",
    "dataset.samples_per_class=16",
    "--set",
    "train.epochs=2",
    "--set",
    "train.warmup_epochs=1",
    "--set",
    "train.batch_size=16",
    "--set",
    "probe.epochs=3",
];

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend(QUICK);
    let o = tico(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("effective rank"));
    for f in ["manifest.json", "checkpoint.bin", "metrics.jsonl", "metrics.csv", "reports.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // Without --config, eval picks the dataset up from the manifest.
    let ck = out.join("checkpoint.bin");
    let o = tico(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("probe accuracy"));
    let report: serde_json::Value =
        serde_json::from_str(fs::read_to_string(out.join("reports.jsonl")).unwrap().trim()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() > 0.0);
}

#[test]
fn verify_emits_json_lines_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = tico(&["verify", "--sizes", "3x2,8x5", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(!text.is_empty());
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["pass"], true, "{line}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("reports.jsonl")).unwrap(), text);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let out = out.to_str().unwrap();
    for args in [
        vec!["train", "--out", out, "--set", "train.rhoo=1"],
        vec!["train", "--out", out, "--set", "train.epochs=ten"],
        vec!["train", "--out", out, "--set", "train.batch_size=1"],
        vec!["ablate", "--axis", "lr", "--out", out],
        vec!["verify", "--sizes", "3by2"],
        vec!["train"],
    ] {
        assert_eq!(tico(&args).status.code(), Some(2), "{args:?}");
    }
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "train.rho = 1\nmystery = 2\n").unwrap();
    let o = tico(&["config", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn missing_checkpoint_is_a_run_failure() {
    let o = tico(&["eval", "--checkpoint", "/nonexistent/checkpoint.bin"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_output_is_a_valid_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = tico(&["config", "--set", "train.rho=3.5"]);
    assert!(o.status.success());
    let path = dir.path().join("all.cfg");
    fs::write(&path, stdout(&o)).unwrap();
    let again = tico(&["config", "--config", path.to_str().unwrap()]);
    assert_eq!(stdout(&again), stdout(&o));
    assert!(stdout(&o).contains("train.rho = 3.5"));
}

#[test]
fn ablate_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--axis", "augmentations", "--values", "baseline,none", "--out"];
    args.push(dir.path().to_str().unwrap());
    args.extend(QUICK);
    let o = tico(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("setting,final_loss,effective_rank"));
    assert!(rows[2].starts_with("augmentations=none,"));
    assert!(Path::new(&dir.path().join("manifest.json")).exists());
}

#[test]
fn dataset_export_has_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.txt");
    let o = tico(&["dataset", "--out", path.to_str().unwrap(), "--set", "dataset.samples_per_class=2"]);
    assert!(o.status.success());
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("tico-dataset 1"));
    assert!(lines.next().unwrap().starts_with("dim 64 classes 8 samples 16"));
    assert_eq!(lines.count(), 16);
}
