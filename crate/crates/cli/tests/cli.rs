use std::path::Path;
use std::process::{Command, Output};

fn latte(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latte")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = latte(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run, interp, comp) =
        (tmp.path().join("d"), tmp.path().join("run"), tmp.path().join("interp"), tmp.path().join("comp"));
    ok(&["synth", "--out", p(&data), "--rule", "first", "--seed", "2"]);
    assert!(ok(&["ingest", "--data", p(&data)]).contains("relation PA"));

    let summary = ok(&["compose", "--data", p(&data), "--order", "2", "--out", p(&comp)]);
    assert!(summary.starts_with("name\tnnz\tdensity\n"));
    assert!(comp.join("edges_PAP.tsv").exists() && comp.join("summary.tsv").exists());

    ok(&[
        "train", "--data", p(&data), "--out", p(&run), "--dim", "16", "--layers", "1", "--fanouts", "25", "--lr",
        "0.01", "--epochs", "30", "--batch", "256",
    ]);
    let manifests: Vec<_> = std::fs::read_dir(&run)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("manifest"))
        .collect();
    assert_eq!(manifests.len(), 1);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dataset_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["train"]["lr"], 0.01);
    assert!(run.join("train_log.csv").exists());

    let ckpt = run.join("checkpoint.json");
    let eval: serde_json::Value = serde_json::from_str(&ok(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt)])).unwrap();
    let keys: Vec<&String> = eval.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["macro_f1", "n_test", "per_class"]);
    assert_eq!(eval["per_class"].as_array().unwrap().len(), 3);
    assert_eq!(eval["n_test"], 120);

    ok(&["interpret", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&interp), "--svg"]);
    for f in ["attention_summary.csv", "correlation.csv", "attention_summary.svg"] {
        assert!(interp.join(f).exists(), "{f}");
    }
}

#[test]
fn untrained_model_scores_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["synth", "--out", p(&data), "--seed", "4"]);
    let eval: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--data", p(&data), "--dim", "16", "--seed", "4"])).unwrap();
    let f1 = eval["macro_f1"].as_f64().unwrap();
    assert!(f1 < 0.5, "{f1}");
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--out", p(&a), "--seed", "7"]);
    ok(&["synth", "--out", p(&b), "--seed", "7"]);
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn gradcheck_deterministic_and_gated() {
    let first = ok(&["gradcheck", "--seed", "1"]);
    assert_eq!(first, ok(&["gradcheck", "--seed", "1"]));
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(latte(&["gradcheck", "--seed", "1", "--tol", "1e-15"]).status.code(), Some(3));
}

#[test]
fn validation_failures_exit_two() {
    assert_eq!(latte(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(latte(&["ingest", "--data", "/definitely/not/here"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["synth", "--out", p(&data)]);
    std::fs::write(data.join("edges_PA.tsv"), "0\t999\n").unwrap();
    let out = latte(&["ingest", "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dangling"));
    let run = tmp.path().join("run");
    let bad = latte(&["train", "--data", p(&data), "--out", p(&run), "--layers", "2", "--fanouts", "5"]);
    assert_eq!(bad.status.code(), Some(2));
}
