//! End-to-end checks of the `vanguard` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use vanguard_core::ingest::write_detection_json;
use vanguard_core::{DetectionSet, DetectionSource, ObbDetection, ObbPolygon};

fn vanguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vanguard"))
        .args(args)
        .env_remove("VANGUARD_CALIBRATION")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn uniform_set(id: &str, n: usize, length: f64) -> DetectionSet {
    let mut set = DetectionSet::new(id, 4000, 4000, DetectionSource::Detector);
    for i in 0..n {
        let y = 10.0 + 40.0 * i as f64;
        let p =
            ObbPolygon::from_array([[5.0, y], [5.0 + length, y], [5.0 + length, y + 20.0], [5.0, y + 20.0]]).unwrap();
        set.detections.push(ObbDetection::new(p, 0.9, "small-vehicle"));
    }
    set
}

fn write_calibration(dir: &Path, l_ref: f64) -> String {
    let path = dir.join("cal.json");
    fs::write(
        &path,
        format!("{{\"bandwidth\":0.1,\"l_ref\":{l_ref},\"n_instances\":100}}\n"),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn estimate_prints_tool_response() {
    let dir = TempDir::new().unwrap();
    let det = dir.path().join("d.json");
    fs::write(&det, write_detection_json(&uniform_set("img", 30, 50.45))).unwrap();
    let cal = write_calibration(dir.path(), 5.045);

    let out = vanguard(&["estimate", "--detections", det.to_str().unwrap(), "--calibration", &cal]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!((v["gsd_pred"].as_f64().unwrap() - 0.1).abs() < 1e-9);
    assert_eq!(v["recommended_action"], "trust");
    assert_eq!(v["path"], "kde");
}

#[test]
fn calibration_from_environment() {
    let dir = TempDir::new().unwrap();
    let det = dir.path().join("d.json");
    fs::write(&det, write_detection_json(&uniform_set("img", 30, 50.0))).unwrap();
    let cal = write_calibration(dir.path(), 4.0);

    let out = Command::new(env!("CARGO_BIN_EXE_vanguard"))
        .args(["estimate", "--detections", det.to_str().unwrap()])
        .env("VANGUARD_CALIBRATION", &cal)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!((v["gsd_pred"].as_f64().unwrap() - 0.08).abs() < 1e-9);
}

#[test]
fn missing_detections_is_operational_error() {
    let out = vanguard(&["estimate", "--detections", "definitely-missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("definitely-missing.json"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(vanguard(&["estimate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(vanguard(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(vanguard(&[]).status.code(), Some(2));
    let out = vanguard(&["area", "--pixels", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_calibration_is_operational_error() {
    let dir = TempDir::new().unwrap();
    let det = dir.path().join("d.json");
    fs::write(&det, write_detection_json(&uniform_set("img", 5, 50.0))).unwrap();
    let cal = dir.path().join("cal.json");
    fs::write(&cal, "{\"l_ref\": -1, \"n_instances\": 3, \"bandwidth\": 0}").unwrap();
    let out = vanguard(&[
        "estimate",
        "--detections",
        det.to_str().unwrap(),
        "--calibration",
        cal.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn area_from_known_gsd() {
    let out = vanguard(&["area", "--pixels", "10000", "--gsd", "0.1"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!((v["area"].as_f64().unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn area_from_detections() {
    let dir = TempDir::new().unwrap();
    let det = dir.path().join("d.json");
    fs::write(&det, write_detection_json(&uniform_set("img", 30, 50.45))).unwrap();
    let out = vanguard(&["area", "--pixels", "10000", "--detections", det.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!((v["area"].as_f64().unwrap() - 100.0).abs() < 1e-6);
}

/// gen -> calibrate -> estimate (directory) -> evaluate, all through the
/// binary, with the evaluation cross-checked against the per-line output.
#[test]
fn synthetic_round_trip() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    let r = root.to_str().unwrap();
    assert_eq!(
        vanguard(&["gen", "--out", r, "--trials", "12", "--seed", "4"])
            .status
            .code(),
        Some(0)
    );

    let cal_path = root.join("cal.json");
    let cal = vanguard(&[
        "calibrate",
        "--annotations",
        root.join("labelTxt").to_str().unwrap(),
        "--meta",
        root.join("meta").to_str().unwrap(),
        "--out",
        cal_path.to_str().unwrap(),
    ]);
    assert_eq!(cal.status.code(), Some(0), "{}", String::from_utf8_lossy(&cal.stderr));
    let cal_json: Value = serde_json::from_str(&stdout(&cal)).unwrap();
    assert_eq!(fs::read_to_string(&cal_path).unwrap(), stdout(&cal));
    let l_ref = cal_json["l_ref"].as_f64().unwrap();
    assert!((4.5..6.0).contains(&l_ref), "{l_ref}");

    let est = vanguard(&[
        "estimate",
        "--detections",
        root.join("detections").to_str().unwrap(),
        "--calibration",
        cal_path.to_str().unwrap(),
    ]);
    assert_eq!(est.status.code(), Some(0));
    let preds = stdout(&est);
    assert_eq!(preds.lines().count(), 12);
    let pred_path = root.join("preds.ndjson");
    fs::write(&pred_path, &preds).unwrap();

    // Oracle: median relative error computed directly from the lines.
    let mut errs: Vec<f64> = preds
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let id = v["image_id"].as_str().unwrap();
            let meta = fs::read_to_string(root.join("meta").join(format!("{id}.txt"))).unwrap();
            let gt: f64 = meta.trim().strip_prefix("gsd:").unwrap().parse().unwrap();
            (v["gsd_pred"].as_f64().unwrap() - gt).abs() / gt
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    let expected_median = 0.5 * (errs[5] + errs[6]);

    let csv_path = root.join("records.csv");
    let ev = vanguard(&[
        "evaluate",
        "--pred",
        pred_path.to_str().unwrap(),
        "--gt",
        root.join("meta").to_str().unwrap(),
        "--json",
        "--csv",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(ev.status.code(), Some(0), "{}", String::from_utf8_lossy(&ev.stderr));
    let report: Value = serde_json::from_str(&stdout(&ev)).unwrap();
    assert_eq!(report["n_evaluated"], 12);
    assert!((report["median_err"].as_f64().unwrap() - expected_median).abs() < 1e-8);
    assert_eq!(fs::read_to_string(&csv_path).unwrap().lines().count(), 13);

    let table = vanguard(&[
        "evaluate",
        "--pred",
        pred_path.to_str().unwrap(),
        "--gt",
        root.join("meta").to_str().unwrap(),
    ]);
    assert_eq!(table.status.code(), Some(0));
    assert!(stdout(&table).contains("median error"));
}

#[test]
fn evaluate_without_ground_truth_fails() {
    let dir = TempDir::new().unwrap();
    let pred = dir.path().join("p.ndjson");
    fs::write(
        &pred,
        "{\"image_id\":\"x\",\"gsd_pred\":0.1,\"confidence\":0.9,\"path\":\"kde\"}\n",
    )
    .unwrap();
    let out = vanguard(&[
        "evaluate",
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_csv() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = vanguard(&["sweep", "--trials", "10", "--seed", "1", "--csv", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("aggregation"));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("factor,setting,"));
    assert!(text.lines().count() > 9);
}
