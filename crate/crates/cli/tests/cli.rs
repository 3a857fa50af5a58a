use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn odorcnn(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odorcnn"))
        .args(args)
        .env("ODORCNN_OUTPUT_ROOT", root)
        .output()
        .expect("spawn odorcnn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let o = odorcnn(root, args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_spectra(root: &Path) {
    ok(root, &["synth", "--n", "40", "--snr", "3", "--seed", "7", "--channels", "4", "--out", "raw"]);
    ok(root, &["preprocess", "--data", "raw", "--channels", "4", "--out", "spec"]);
}

fn manifest(dir: &Path) -> toml::Table {
    toml::from_str(&fs::read_to_string(dir.join("run.toml")).unwrap()).unwrap()
}

#[test]
fn synth_preprocess_ensemble_cv_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    small_spectra(root);
    let table = ok(root, &["cv", "--ensemble", "--data", "spec", "--epochs", "3", "--out", "cv1"]);
    let report = fs::read_to_string(root.join("cv1/report.txt")).unwrap();
    assert_eq!(table, report);
    let header = report.lines().find(|l| l.starts_with("Model")).unwrap();
    assert_eq!(header.split_whitespace().collect::<Vec<_>>(), ["Model", "Acc", "F1", "AUC", "Sens", "Spec"]);
    for model in ["res_cnn", "attention_cnn", "ensemble"] {
        assert!(report.lines().any(|l| l.starts_with(model)), "{model} row missing");
        assert!(root.join(format!("cv1/{model}_calibration.csv")).is_file());
        assert!(root.join(format!("cv1/{model}_confidence.csv")).is_file());
        for fold in 0..5 {
            assert!(root.join(format!("cv1/fold{fold}/{model}_trials.csv")).is_file());
        }
    }
    assert!(report.contains("(complete)"));

    // manifest checksums match the files on disk
    let m = manifest(&root.join("cv1"));
    assert_eq!(m["status"].as_str(), Some("complete"));
    assert_eq!(m["seeds"]["master"].as_str(), Some("7"));
    assert!(m["versions"]["odorcnn"].is_str());
    let artifacts = m["artifacts"].as_array().unwrap();
    let ckpt = artifacts.iter().find(|a| a["path"].as_str() == Some("fold0/res_cnn.ckpt")).unwrap();
    let bytes = fs::read(root.join("cv1/fold0/res_cnn.ckpt")).unwrap();
    assert_eq!(ckpt["sha256"].as_str().unwrap(), odorcnn::util::sha256_hex(&bytes));
    assert_eq!(ckpt["bytes"].as_integer().unwrap() as usize, bytes.len());

    // the manifest alone reproduces the run
    ok(root, &["cv", "--config", "cv1/run.toml", "--out", "cv2"]);
    for f in ["report.txt", "folds.csv", "fold3/ensemble_trials.csv", "ensemble_confidence.csv"] {
        assert_eq!(fs::read(root.join("cv1").join(f)).unwrap(), fs::read(root.join("cv2").join(f)).unwrap(), "{f}");
    }

    // checkpoints from the run can be evaluated and exported
    let line = ok(root, &["evaluate", "--checkpoint", "cv1/fold0/attention_cnn.ckpt", "--data", "spec", "--out", "ev"]);
    assert!(line.starts_with("attention_cnn: n=40"), "{line}");
    ok(root, &["export-features", "--checkpoint", "cv1/fold1/res_cnn.ckpt", "--data", "spec", "--out", "feat"]);
    let features = fs::read_to_string(root.join("feat/features.csv")).unwrap();
    assert_eq!(features.lines().count(), 41);
    assert!(features.lines().all(|l| l.split(',').count() == 130));
    let info = ok(root, &["info", "--data", "spec", "--checkpoint", "cv1/fold0/res_cnn.ckpt"]);
    assert!(info.contains("kind = spectra") && info.contains("scaler = true"), "{info}");
}

#[test]
fn train_writes_curves_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    small_spectra(root);
    ok(root, &["train", "--data", "spec", "--arch", "res", "--schedule", "one_cycle", "--epochs", "4", "--out", "tr"]);
    let curves = fs::read_to_string(root.join("tr/curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,lr,train_loss,val_loss,val_acc\n"));
    assert_eq!(curves.lines().count(), 5);
    let config = fs::read_to_string(root.join("tr/config.toml")).unwrap();
    assert!(config.contains("train.schedule = \"one_cycle\""));
    assert!(root.join("tr/model.ckpt").is_file());
}

#[test]
fn gradcheck_passes_for_both_architectures() {
    let tmp = tempfile::tempdir().unwrap();
    for arch in ["res", "attention"] {
        let out = ok(tmp.path(), &["gradcheck", "--arch", arch]);
        let err: f64 = out.trim().rsplit('=').next().unwrap().parse().unwrap();
        assert!(err <= 1e-4, "{out}");
    }
}

#[test]
fn error_conventions() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let o = odorcnn(root, &["evaluate", "--checkpoint", "missing", "--data", "spec"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=io msg="), "{}", stderr(&o));
    assert!(!root.join("runs/evaluate").exists());

    assert_eq!(odorcnn(root, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(odorcnn(root, &["cv", "--no-such-flag"]).status.code(), Some(2));

    let o = odorcnn(root, &["cv", "--data", "x", "--set", "train.batch_size=abc"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=invalid_config msg=train.batch_size:"), "{}", stderr(&o));
    let o = odorcnn(root, &["cv", "--data", "x", "--set", "cv.k=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("msg=cv.k:"), "{}", stderr(&o));
}

#[test]
fn failed_run_leaves_an_incomplete_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    small_spectra(root);
    // a runaway learning rate makes every fold diverge
    let o = odorcnn(root, &["cv", "--data", "spec", "--epochs", "2", "--lr", "1e30", "--out", "bad"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=incomplete_run"));
    let m = manifest(&root.join("bad"));
    assert_eq!(m["status"].as_str(), Some("incomplete"));
    assert!(fs::read_to_string(root.join("bad/report.txt")).unwrap().contains("(incomplete)"));

    let o = odorcnn(root, &["preprocess", "--data", "raw", "--channels", "8", "--out", "spec8"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(manifest(&root.join("spec8"))["status"].as_str(), Some("incomplete"));
}
