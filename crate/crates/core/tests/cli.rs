//! End-to-end runs of the command-line binary on a small cohort.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lesiondet::cli::RunConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesiondet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, r#"{"k": 2, "theta": 0.8, "train": {"max_iterations": 20, "val_window": 4}}"#).unwrap();
    path
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let cfg = p(&cfg);
    ok(&["--seed", "5", "--out", p(&d.join("cohort")), "phantom", "--patients", "4"]);
    assert!(d.join("cohort/manifest.json").exists());

    ok(&["--config", cfg, "--out", p(&d.join("tune")), "tune", "--cohort", p(&d.join("cohort"))]);
    let ss = d.join("tune/scale_space.json");
    assert!(ss.exists() && d.join("tune/tune_report.json").exists());

    ok(&["--config", cfg, "--out", p(&d.join("train")), "train", "--cohort", p(&d.join("cohort")), "--scale-space", p(&ss)]);
    for f in ["checkpoint.json", "train_log.csv", "train_summary.json", "run_config.json"] {
        assert!(d.join("train").join(f).exists(), "{f}");
    }

    let volume = d.join("cohort/p000/d0/volume.json");
    let stdout = ok(&[
        "--config",
        cfg,
        "--out",
        p(&d.join("detect")),
        "detect",
        "--volume",
        p(&volume),
        "--scale-space",
        p(&ss),
        "--checkpoint",
        p(&d.join("train/checkpoint.json")),
    ]);
    assert!(stdout.ends_with("detections\n"));
    let csv = fs::read_to_string(d.join("detect/detections.csv")).unwrap();
    assert!(csv.starts_with("x_mm,y_mm,z_mm,score\n"));

    let echoed: RunConfig = serde_json::from_str(&fs::read_to_string(d.join("detect/run_config.json")).unwrap()).unwrap();
    assert_eq!(echoed.train.max_iterations, 20);
    assert_eq!(echoed.k, 2);
}

#[test]
fn cv_then_froc_reproduces_fold_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let cfg = p(&cfg);
    ok(&["--seed", "9", "--out", p(&d.join("cohort")), "phantom", "--patients", "4"]);
    let summary = ok(&["--config", cfg, "--seed", "9", "--out", p(&d.join("cv")), "cv", "--cohort", p(&d.join("cohort"))]);
    assert!(summary.starts_with("sensitivity"));
    for f in ["mean_curve.csv", "baseline_mean_curve.csv", "summary.csv", "summary.txt", "cv_report.json"] {
        assert!(d.join("cv").join(f).exists(), "{f}");
    }
    let fold = d.join("cv/fold_1");
    ok(&[
        "--config",
        cfg,
        "--out",
        p(&d.join("froc")),
        "froc",
        "--cohort",
        p(&d.join("cohort")),
        "--detections",
        p(&fold.join("detections")),
    ]);
    assert_eq!(fs::read(d.join("froc/froc.csv")).unwrap(), fs::read(fold.join("froc.csv")).unwrap());

    ok(&["--config", cfg, "--seed", "9", "--threads", "2", "--out", p(&d.join("cv2")), "cv", "--cohort", p(&d.join("cohort"))]);
    for f in ["mean_curve.csv", "fold_0/froc.csv", "fold_1/baseline_froc.csv"] {
        assert_eq!(fs::read(d.join("cv").join(f)).unwrap(), fs::read(d.join("cv2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = run(&["--out", p(&d.join("x")), "detect", "--volume", p(&d.join("nope.json"))]);
    assert_eq!(missing.status.code(), Some(4));
    assert!(!d.join("x").exists());

    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"k": 1}"#).unwrap();
    let out = run(&["--config", p(&bad), "--out", p(&d.join("y")), "phantom"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`k`"));
    assert!(!d.join("y").exists());

    fs::write(&bad, r#"{"colour": 1}"#).unwrap();
    assert_eq!(run(&["--config", p(&bad), "phantom"]).status.code(), Some(2));

    fs::write(
        &bad,
        r#"{"theta": 1.0, "grid": [{"sigma_min_mm": 1.0, "sigma_max_mm": 1.0, "n_scales": 1, "log_threshold": 100.0}]}"#,
    )
    .unwrap();
    ok(&["--seed", "1", "--out", p(&d.join("cohort")), "phantom", "--patients", "2"]);
    let out = run(&["--config", p(&bad), "--out", p(&d.join("t")), "tune", "--cohort", p(&d.join("cohort"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn same_seed_same_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a", "b"] {
        ok(&["--seed", "3", "--out", p(&d.join(name)), "phantom", "--patients", "2"]);
    }
    let bytes = |n: &str| fs::read(d.join(n).join("p001/d0/volume.json")).unwrap();
    assert_eq!(bytes("a"), bytes("b"));
}
