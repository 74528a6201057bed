use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecg_wvd::eval::MetricsReport;
use ecg_wvd::images::read_tensor;
use ecg_wvd::ingest::{load_beat_csv, write_beat_csv, ClassLabel, SplitTag};
use ecg_wvd::synthetic::balanced;
use ecg_wvd::tfr::ramp_image;

fn ecgwvd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgwvd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ecgwvd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `per_class` synthetic beats of every class, written as a beat CSV.
fn beats_csv(dir: &Path, name: &str, per_class: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    write_beat_csv(&balanced(per_class, seed, SplitTag::Train), &path, Default::default()).unwrap();
    path
}

#[test]
fn transform_writes_one_image_per_beat() {
    let dir = tempfile::tempdir().unwrap();
    let csv = beats_csv(dir.path(), "beats.csv", 2, 1);
    let out = dir.path().join("img.f32");
    ok(&["transform", "--input", s(&csv), "--out", s(&out)]);

    assert_eq!(std::fs::metadata(&out).unwrap().len(), 10 * 128 * 128 * 4);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("img.f32.json")).unwrap()).unwrap();
    assert_eq!(sidecar["count"], 10);
    assert_eq!(sidecar["rows"], 128);
    assert_eq!(sidecar["cols"], 128);
    assert_eq!(sidecar["ramp_strength"], 0.25);
    let set = read_tensor(&out).unwrap();
    let beats = load_beat_csv(&csv).unwrap();
    assert_eq!(set.labels, beats.labels());
}

#[test]
fn no_ramp_differs_by_the_ramp_image() {
    let dir = tempfile::tempdir().unwrap();
    let csv = beats_csv(dir.path(), "beats.csv", 2, 2);
    let with = dir.path().join("with.f32");
    let without = dir.path().join("without.f32");
    ok(&["transform", "--input", s(&csv), "--out", s(&with)]);
    ok(&["transform", "--input", s(&csv), "--out", s(&without), "--no-ramp"]);
    let (a, b) = (read_tensor(&with).unwrap(), read_tensor(&without).unwrap());
    assert_eq!(b.ramp_strength, 0.0);
    let ramp = ramp_image(128, 128, 0.25);
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        for ((x, y), r) in a.image(i).iter().zip(b.image(i)).zip(&ramp.values) {
            worst = worst.max((*x as f64 - *y as f64 - r).abs());
        }
    }
    // both images are rounded to single precision independently
    assert!(worst <= 2.0 * f32::EPSILON as f64, "{worst:e}");
}

#[test]
fn transform_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = beats_csv(dir.path(), "beats.csv", 2, 3);
    let (a, b) = (dir.path().join("a.f32"), dir.path().join("b.f32"));
    ok(&["--seed", "4", "transform", "--input", s(&csv), "--out", s(&a)]);
    ok(&["--seed", "4", "transform", "--input", s(&csv), "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.f32.json")).unwrap(),
        std::fs::read(dir.path().join("b.f32.json")).unwrap()
    );
}

#[test]
fn bench_with_no_beats_is_an_empty_report() {
    let out = ok(&["bench", "--n", "0"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["beats"], 0);
    assert!(report["total"].is_null());
}

#[test]
fn bench_reports_total_at_least_transform() {
    let out = ok(&["bench", "--n", "3"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let total = report["total"]["mean_ms"].as_f64().unwrap();
    let transform = report["transform"]["mean_ms"].as_f64().unwrap();
    assert!(total >= transform);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = dir.path().join("x.f32");
    assert_eq!(ecgwvd(&["transform", "--input", s(&missing), "--out", s(&out)]).status.code(), Some(3));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "0.1,0.2,7.0\n").unwrap();
    assert_eq!(ecgwvd(&["transform", "--input", s(&bad), "--out", s(&out)]).status.code(), Some(2));

    let csv = beats_csv(dir.path(), "beats.csv", 1, 5);
    let run = dir.path().join("run");
    let preset = ecgwvd(&["train", "--input", s(&csv), "--out-dir", s(&run), "--preset", "11"]);
    assert_eq!(preset.status.code(), Some(2));

    // a tensor blob that disagrees with its sidecar
    let img = dir.path().join("img.f32");
    ok(&["transform", "--input", s(&csv), "--out", s(&img)]);
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
    let png = dir.path().join("png");
    assert_eq!(ecgwvd(&["export-images", "--input", s(&img), "--out-dir", s(&png)]).status.code(), Some(2));

    assert_eq!(ecgwvd(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn ingest_check_flags_reference_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let csv = beats_csv(dir.path(), "beats.csv", 2, 6);
    let out = ok(&["ingest-check", s(&csv)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["manifest"]["count"], 10);
    assert_eq!(report["matches_reference"], false);
    assert_eq!(ecgwvd(&["ingest-check", s(&csv), "--expect-reference"]).status.code(), Some(2));
}

#[test]
fn segment_labels_every_beat() {
    let dir = tempfile::tempdir().unwrap();
    let strip = dir.path().join("strip.csv");
    let fs = 360.0;
    let samples: String = (0..(fs as usize * 12))
        .map(|i| {
            let phase = (i as f64 / fs) % 0.8 / 0.8;
            let v = (-((phase - 0.3) / 0.015).powi(2)).exp() + 0.2 * (-((phase - 0.6) / 0.06).powi(2)).exp();
            format!("{v}\n")
        })
        .collect();
    std::fs::write(&strip, format!("lead_ii\n{samples}")).unwrap();
    let beats = dir.path().join("beats.csv");
    ok(&["segment", "--input", s(&strip), "--out", s(&beats), "--label", "S"]);
    let ds = load_beat_csv(&beats).unwrap();
    assert!(ds.len() >= 12, "{} beats", ds.len());
    assert!(ds.records.iter().all(|r| r.label == ClassLabel::S && r.samples.len() == 187));
}

#[test]
fn augment_balances_to_target() {
    let dir = tempfile::tempdir().unwrap();
    let csv = beats_csv(dir.path(), "beats.csv", 3, 7);
    let out = dir.path().join("aug.csv");
    ok(&["--seed", "1", "augment", "--input", s(&csv), "--out", s(&out), "--target", "5"]);
    let ds = load_beat_csv(&out).unwrap();
    assert_eq!(ds.len(), 25);
    let again = dir.path().join("aug2.csv");
    ok(&["--seed", "1", "augment", "--input", s(&csv), "--out", s(&again), "--target", "5"]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn train_eval_classify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = beats_csv(dir.path(), "train.csv", 4, 8);
    let test = beats_csv(dir.path(), "test.csv", 2, 9);
    let run = dir.path().join("run");
    ok(&["--seed", "3", "train", "--input", s(&train), "--out-dir", s(&run), "--epochs", "1"]);
    let model = run.join("model.bin");
    for f in ["model.bin", "history.json", "timings.json", "manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);

    let out = ok(&["eval", "--model", s(&model), "--input", s(&test), "--json"]);
    let report: MetricsReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.per_class.len(), 5);
    assert_eq!(report.total_support(), 10);

    let out = ok(&["eval", "--model", s(&model), "--input", s(&test), "--json", "--drop-q"]);
    let report: MetricsReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.per_class.len(), 4);
    assert_eq!(report.total_support(), 8);

    let preds = dir.path().join("preds.csv");
    ok(&["classify", "--model", s(&model), "--input", s(&test), "--out", s(&preds)]);
    let text = std::fs::read_to_string(&preds).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "index,class,p_N,p_S,p_V,p_F,p_Q");
    assert_eq!(lines.len(), 11);
}

#[test]
fn reproduce_is_deterministic_and_flags_beat_config() {
    let dir = tempfile::tempdir().unwrap();
    let train = beats_csv(dir.path(), "train.csv", 4, 10);
    let test = beats_csv(dir.path(), "test.csv", 2, 11);
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"seed": 5, "schedule": {"epochs": 7}}"#).unwrap();

    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        ok(&[
            "--seed", "9", "reproduce", "--train", s(&train), "--test", s(&test), "--out-dir", s(&out),
            "--config", s(&config), "--epochs", "1",
        ]);
        runs.push(out);
    }
    for f in ["report.txt", "report.json", "confusion.csv", "history.json", "manifest.json", "model.bin"] {
        assert_eq!(std::fs::read(runs[0].join(f)).unwrap(), std::fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(runs[0].join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["epochs_run"], 1);

    let report = std::fs::read_to_string(runs[0].join("report.txt")).unwrap();
    for row in ["F", "N", "Q", "S", "V", "macro avg", "weighted avg"] {
        assert!(report.lines().any(|l| l.trim_start().starts_with(row)), "{row} missing:\n{report}");
    }
}

#[test]
fn reproduce_without_data_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecgwvd(&["reproduce", "--data-dir", s(dir.path()), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
}
