use std::path::Path;
use std::process::{Command, Output};

use zsl_core::evaluation::ExperimentReport;
use zsl_core::inference::Matcher;

fn zsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsl"))
        .args(args)
        .env_remove("ZSL_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = zsl(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and parsed error record of a failing run.
fn fails(args: &[&str]) -> (i32, serde_json::Value) {
    let out = zsl(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let record = serde_json::from_str(stderr.lines().last().unwrap()).unwrap_or_else(|e| panic!("{e}: {stderr}"));
    (out.status.code().unwrap(), record)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let data = dir.join("data");
    let mut args = vec!["gen-synthetic", "--out", s(&data)];
    args.extend_from_slice(extra);
    ok(&args);
    data.join("run.toml")
}

#[test]
fn noiseless_synthetic_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), &["--noise", "0", "--shift", "0"]);
    for f in ["features.zslf", "labels.txt", "class_vectors.txt", "truth.json", "run.toml"] {
        assert!(cfg.with_file_name(f).exists(), "{f} missing");
    }
    let out = dir.path().join("out");
    ok(&["eval", "--config", s(&cfg), "--splits", "10", "--out", s(&out)]);
    let report = ExperimentReport::read_json(out.join("report.json")).unwrap();
    assert_eq!(report.per_split.len(), 10);
    assert_eq!(report.mean, 1.0);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), &[]);
    let out = dir.path().join("out");
    ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--matcher",
        "nrm",
        "--self-train",
        "--st-k",
        "10",
        "--splits",
        "1",
        "--seed",
        "7",
        "--out",
        s(&out),
    ]);
    let report = ExperimentReport::read_json(out.join("report.json")).unwrap();
    assert_eq!(report.config.matcher, Matcher::Nrm);
    assert!(report.config.self_train);
    assert_eq!((report.config.n_splits, report.config.seed, report.config.hyper.self_train_k), (1, 7, 10));

    let resolved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    let table: toml::Table = resolved.parse().unwrap();
    assert_eq!(table["experiment"]["matcher"].as_str(), Some("nrm"));
    assert_eq!(table["experiment"]["self_train"].as_bool(), Some(true));
    // untouched values come from the file
    assert_eq!(table["hyper"]["graph_k"].as_integer(), Some(5));
}

#[test]
fn rerun_from_resolved_config_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), &[]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--splits",
        "4",
        "--threads",
        "1",
        "--retain-predictions",
        "--out",
        s(&a),
    ]);
    let out = Command::new(env!("CARGO_BIN_EXE_zsl"))
        .args(["eval", "--config", s(&a.join("config.toml")), "--out", s(&b)])
        .env("ZSL_THREADS", "4")
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["report.json", "report.csv", "predictions.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), &[]);

    let (code, rec) = fails(&["eval", "--config", s(&cfg), "--word-vectors", s(&dir.path().join("missing.txt"))]);
    assert_eq!(code, 3);
    assert_eq!(rec["error"], "data");
    assert!(rec["message"].as_str().unwrap().contains("missing.txt"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[experiment]\nmatchr = \"nn\"\n").unwrap();
    let (code, rec) = fails(&["eval", "--config", s(&bad)]);
    assert_eq!((code, rec["exit_code"].as_i64()), (2, Some(2)));

    let (code, _) = fails(&["eval", "--config", s(&cfg), "--ridge", "0"]);
    assert_eq!(code, 2);
    let (code, _) = fails(&["eval", "--config", s(&cfg), "--metric", "auc"]);
    assert_eq!(code, 2, "AUC without distractors is a config error");
}

#[test]
fn sweep_grid_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), &[]);
    let out = dir.path().join("sweep");
    let args = [
        "sweep",
        "--config",
        s(&cfg),
        "--splits",
        "2",
        "--ridges",
        "1e-6,1e-3",
        "--manifolds",
        "0,40",
        "--out",
        s(&out),
    ];
    assert!(ok(&args).contains("4 cells run, 0 reused"));
    let cells: Vec<_> = std::fs::read_dir(out.join("cells")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(cells.len(), 4);
    let stamps: Vec<_> = cells
        .iter()
        .map(|c| std::fs::metadata(c.join("report.json")).unwrap().modified().unwrap())
        .collect();
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);

    // drop one finished cell: only that one is recomputed
    std::fs::remove_file(cells[0].join("report.json")).unwrap();
    assert!(ok(&args).contains("1 cells run, 3 reused"));
    for (c, t) in cells.iter().zip(&stamps).skip(1) {
        assert_eq!(std::fs::metadata(c.join("report.json")).unwrap().modified().unwrap(), *t);
    }
    assert_eq!(std::fs::read_to_string(out.join("summary.csv")).unwrap(), summary);

    let (code, rec) = fails(&["sweep", "--config", s(&cfg), "--ridges", "0,1e-3", "--out", s(&out)]);
    assert_eq!(code, 2);
    assert!(rec["message"].as_str().unwrap().contains("near random"));
}

#[test]
fn analyze_needs_retained_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), &["--kind", "clustered", "--seed", "3"]);
    let plain = dir.path().join("plain");
    ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--embedding",
        "ridge",
        "--ridge",
        "1e-3",
        "--splits",
        "12",
        "--out",
        s(&plain),
    ]);
    let (code, rec) = fails(&["analyze", "--report", s(&plain.join("report.json")), "--out", s(&dir.path().join("an0"))]);
    assert_eq!(code, 2);
    assert!(rec["message"].as_str().unwrap().contains("retention"));

    let kept = dir.path().join("kept");
    ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--embedding",
        "ridge",
        "--ridge",
        "1e-3",
        "--splits",
        "12",
        "--retain-predictions",
        "--out",
        s(&kept),
    ]);
    let an = dir.path().join("an");
    ok(&[
        "analyze",
        "--report",
        s(&kept.join("report.json")),
        "--out",
        s(&an),
        "--curve-splits",
        "2",
        "--percents",
        "50,100",
    ]);
    for f in [
        "correlation.csv",
        "affinity.csv",
        "affinity_percentile.csv",
        "relatedness.csv",
        "curve.csv",
        "summary.json",
    ] {
        assert!(an.join(f).exists(), "{f} missing");
    }
    let curve = std::fs::read_to_string(an.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
}

#[test]
fn fit_predict_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen(dir.path(), &["--noise", "0"]);
    let out = dir.path().join("out");
    ok(&["fit", "--config", s(&cfg), "--split", "1", "--splits", "3", "--out", s(&out)]);
    assert!(out.join("model_split1.zsla").exists());
    let stdout = ok(&["predict", "--config", s(&cfg), "--split", "1", "--splits", "3", "--out", s(&out)]);
    assert!(stdout.contains("accuracy 1.0000"), "{stdout}");
    let preds = std::fs::read_to_string(out.join("predictions_split1.csv")).unwrap();
    // 10 classes, 5 tested, 30 instances each
    assert_eq!(preds.lines().count(), 151);
    assert_eq!(preds.lines().next(), Some("instance_id,predicted_class,score"));

    ok(&[
        "export-projections",
        "--config",
        s(&cfg),
        "--split",
        "1",
        "--splits",
        "3",
        "--self-train",
        "--st-k",
        "5",
        "--out",
        s(&out),
    ]);
    let rows = zsl_core::analysis::read_projections(out.join("projections_split1.csv")).unwrap();
    assert_eq!(rows.len(), 150 + 2 * 5);

    let (code, _) = fails(&["fit", "--config", s(&cfg), "--split", "3", "--splits", "3", "--out", s(&out)]);
    assert_eq!(code, 2);
}
