use std::path::Path;
use std::process::{Command, Output};

use phr_cli::{ReportFile, TrainReport};
use phr_core::data::config::RunConfig;
use phr_core::data::manifest::{load_dataset, PredictionFile};

fn phr3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phr3d")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = phr3d(args);
    assert!(
        out.status.success(),
        "phr3d {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], code: i32, class: &str) {
    let out = phr3d(args);
    assert_eq!(out.status.code(), Some(code), "phr3d {args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{class}]: ")), "{err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_synth(dir: &Path, count: usize, val: usize) -> std::path::PathBuf {
    let spec = dir.join("spec.json");
    let text = format!(
        r#"{{"count": {count}, "image_size": 96, "scale": [24.0, 30.0], "translation": 4.0, "val_count": {val}, "seed": 3}}"#
    );
    std::fs::write(&spec, text).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--spec", s(&spec), "--out", s(&data)]);
    data
}

const TINY_RUN: &str = r#"{
    "preset": "desk",
    "n_points": 5,
    "augment": false,
    "schedule": {
        "detection": {"epochs": 1, "lr": [0.05, 0.01]},
        "regression": {"epochs": 1, "lr": [0.05, 0.01]},
        "joint": {"epochs": 1, "lr": [0.05, 0.01]},
        "z": {"epochs": 2, "lr": [0.01, 0.005]},
        "lr_steps": 2,
        "momentum": 0.9,
        "batch_xy": 4,
        "batch_z": 4,
        "gt_heatmap_mix": 0.5,
        "joint_weights": [1.0, 1.0]
    },
    "train_manifest": "data/train.csv",
    "val_manifest": "data/val.csv",
    "output_dir": "run",
    "seed": 9
}"#;

#[test]
fn audit_prints_the_paper_census() {
    let text = ok(&["audit", "--preset", "paper"]);
    assert!(text.contains("z regressor bottlenecks 68"), "{text}");
    assert!(text.contains("B3  24 bottlenecks [(128, 1x1), (128, 3x3), (512, 1x1)]"), "{text}");
    assert!(text.contains("z regressor input channels 69"));
    assert!(text.contains("fully connected (66)"));
    let desk = ok(&["audit", "--preset", "desk", "--points", "5", "--json"]);
    let c: phr_core::model::Census = serde_json::from_str(&desk).unwrap();
    assert_eq!(c.z_input_channels, 8);
    assert_eq!(c.z_outputs, 5);
}

#[test]
fn synth_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let da = write_synth(a.path(), 8, 4);
    let db = write_synth(b.path(), 8, 4);
    for f in ["train.csv", "val.csv", "val_pairs.csv", "images/train_00003.png", "images/val_00001.png"] {
        assert_eq!(std::fs::read(da.join(f)).unwrap(), std::fs::read(db.join(f)).unwrap(), "{f}");
    }
    let ds = load_dataset(&da.join("train.csv"), Some(5)).unwrap();
    assert_eq!(ds.records.len(), 4);
}

#[test]
fn eval_of_ground_truth_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_synth(dir.path(), 8, 4);
    let gt = data.join("val.csv");
    let ds = load_dataset(&gt, None).unwrap();
    let pred = dir.path().join("pred.csv");
    PredictionFile {
        entries: ds.records.iter().map(|r| (r.id.clone(), r.landmarks.clone())).collect(),
    }
    .write(&pred)
    .unwrap();
    let report = dir.path().join("report");
    let pairs = data.join("val_pairs.csv");
    let out = ok(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--pairs", s(&pairs), "--report", s(&report)]);
    assert!(out.starts_with("images 4 gte 0.0000"), "{out}");
    let r: ReportFile = serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(r.report.gte, 0.0);
    assert!(r.report.per_image.iter().all(|e| e.xyz == 0.0));
    assert_eq!(r.config_hash.len(), 64);
    assert!(r.seed.is_none());
    // Cross-view pairs are different poses of one subject, so not zero.
    assert!(r.report.cvgtce.unwrap() > 0.0);
    let curve = std::fs::read_to_string(report.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 201);
    assert!(curve.lines().nth(1).unwrap().starts_with("0,"));

    let out = ok(&["curve", "--report", s(&report), "--axes", "xy", "--samples", "11", "--out", s(&dir.path().join("c.csv"))]);
    assert!(out.starts_with("wrote 11 curve samples"));
    let c = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
    // Errors are all zero and the curve counts e < t.
    assert!(c.lines().nth(1).unwrap().ends_with(",0"));
    assert!(c.lines().skip(2).all(|l| l.ends_with(",1")), "{c}");
}

#[test]
fn train_predict_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    write_synth(dir.path(), 16, 4);
    let cfg_path = dir.path().join("run.json");
    std::fs::write(&cfg_path, TINY_RUN).unwrap();
    let out = ok(&["train", "--config", s(&cfg_path)]);
    assert!(out.lines().next().unwrap().starts_with("1,detection,"), "{out}");

    let run = dir.path().join("run");
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,stage,loss,val_gte_xy,val_gte_z,lr");
    assert_eq!(lines.len(), 1 + 5);
    assert!(lines[5].starts_with("2,z,"));
    let summary: TrainReport = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.config_hash, RunConfig::load(&cfg_path).unwrap().hash());
    assert_eq!(summary.seed, 9);
    assert_eq!(summary.summary.z_val_loss.len(), 2);
    for stage in ["detection", "regression", "joint_xy", "done"] {
        assert!(run.join(format!("checkpoints/stage_{stage}.phr")).is_file());
    }

    let pred = run.join("pred.csv");
    let val = dir.path().join("data/val.csv");
    ok(&["predict", "--model", s(&run.join("model.phr")), "--images", s(&val), "--out", s(&pred)]);
    let p = PredictionFile::read(&pred).unwrap();
    assert_eq!(p.entries.len(), 4);
    assert_eq!(p.entries[0].0, "images/val_00000.png");

    let report = run.join("report");
    ok(&["eval", "--pred", s(&pred), "--gt", s(&val), "--report", s(&report), "--config", s(&cfg_path)]);
    let r: ReportFile = serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(r.config_hash, summary.config_hash);
    assert_eq!(r.seed, Some(9));
    assert!(r.report.gte > 0.0);

    // Resuming after the joint stage only reruns Z.
    let out = ok(&["train", "--config", s(&cfg_path), "--resume", s(&run.join("checkpoints/stage_joint_xy"))]);
    assert!(out.lines().next().unwrap().starts_with("1,z,"), "{out}");
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("bad.json");
    std::fs::write(&cfg, TINY_RUN.replace("\"seed\": 9", "\"seed\": 9, \"colour\": 1")).unwrap();
    fails(&["train", "--config", s(&cfg)], 2, "config_error");
    fails(&["train", "--config", s(&d.join("absent.json"))], 2, "config_error");
    fails(&["audit", "--preset", "paper", "--points", "0"], 2, "config_error");

    // Valid config, missing data.
    std::fs::write(&cfg, TINY_RUN).unwrap();
    fails(&["train", "--config", s(&cfg)], 3, "data_error");
    fails(&["predict", "--model", s(&d.join("none")), "--images", s(&cfg), "--out", s(&d.join("p.csv"))], 3, "data_error");

    // Coincident eye corners make the normaliser degenerate.
    std::fs::write(d.join("a.png"), []).unwrap();
    let mut row = String::from("a.png,0,0,10,10");
    for _ in 0..5 {
        row.push_str(",3,3,0");
    }
    std::fs::write(d.join("gt.csv"), &row).unwrap();
    std::fs::write(d.join("p.csv"), row.replace(",0,0,10,10", "")).unwrap();
    fails(
        &["eval", "--pred", s(&d.join("p.csv")), "--gt", s(&d.join("gt.csv")), "--report", s(&d.join("r"))],
        4,
        "numeric_error",
    );
}
