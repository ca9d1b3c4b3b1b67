use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drow::data::{load_sequence, write_sequence, LoadOptions, ScanSequence, SequencePaths};
use drow::net::io::load_params;
use drow::types::{Annotation, ClassId, Detection, LaserScan, OdometryFrame, ScanGeometry};
use drow::vote::write_detections;

fn drow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = drow(args);
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

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

fn synth(dir: &Path, frames: usize, seed: u64) -> PathBuf {
    ok(&["synth", "--out", s(dir), "--frames", &frames.to_string(), "--seed", &seed.to_string()]);
    dir.join("seq_000")
}

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--epochs", "2", "--widths", "4,4,8,8"];
    args.extend_from_slice(extra);
    ok(&args);
    out.join("weights.bin")
}

#[test]
fn synth_is_reproducible_and_creates_missing_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("deep/a");
    let b = tmp.path().join("deep/b");
    synth(&a, 400, 7);
    synth(&b, 400, 7);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta, tb);
    assert!(ta.contains_key("seq_000.csv") && ta.contains_key("synth.config.toml"));
}

#[test]
fn invalid_scene_fails_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[scene]\ncorridor_length = -1.0\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = drow(&["--config", s(&cfg), "synth", "--out", s(&out_dir), "--frames", "10"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error kind=config msg="), "{line}");
    assert!(!out_dir.exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let out = drow(&["--config", s(&cfg), "stats", "--data", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error kind=config"));
}

#[test]
fn train_writes_weights_loss_log_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let stem = synth(&tmp.path().join("data"), 200, 3);
    let run = tmp.path().join("run");
    let weights = train_tiny(&stem, &run, &["--fusion", "late", "--T", "5"]);
    let log = fs::read_to_string(run.join("loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let params = load_params(&weights, None).unwrap();
    assert_eq!(params.config.input_frames, 6);
    let echoed = fs::read_to_string(run.join("train.config.toml")).unwrap();
    assert!(echoed.contains("fusion = \"late\"") && echoed.contains("input_frames = 6"));
}

#[test]
fn late_without_history_matches_no_time_parameter_count() {
    let tmp = tempfile::tempdir().unwrap();
    let stem = synth(&tmp.path().join("data"), 200, 3);
    let late = train_tiny(&stem, &tmp.path().join("late"), &["--fusion", "late", "--T", "0"]);
    let none = train_tiny(&stem, &tmp.path().join("none"), &["--fusion", "none"]);
    let (late, none) = (load_params(&late, None).unwrap(), load_params(&none, None).unwrap());
    assert_eq!(late.parameter_count(), none.parameter_count());
}

#[test]
fn detect_is_byte_identical_across_runs_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let stem = synth(&tmp.path().join("data"), 200, 3);
    let weights = train_tiny(&stem, &tmp.path().join("run"), &["--T", "2"]);
    let cfg = tmp.path().join("run/train.config.toml");
    let detect = |name: &str, jobs: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "--config", s(&cfg), "--jobs", jobs, "detect", "--weights", s(&weights), "--sequence", s(&stem),
            "--out", s(&out), "--annotated-only",
        ]);
        fs::read(out).unwrap()
    };
    let a = detect("a.txt", "1");
    assert_eq!(a, detect("b.txt", "1"));
    assert_eq!(a, detect("c.txt", "3"));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 20);
}

#[test]
fn detect_rejects_mismatched_preprocessing() {
    let tmp = tempfile::tempdir().unwrap();
    let stem = synth(&tmp.path().join("data"), 100, 3);
    let weights = train_tiny(&stem, &tmp.path().join("run"), &["--T", "2"]);
    let out = drow(&["detect", "--weights", s(&weights), "--sequence", s(&stem), "--out", s(&tmp.path().join("d.txt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error kind=config_mismatch"));
}

fn one_frame_sequence(dir: &Path, annotations: Vec<Annotation>) -> PathBuf {
    let geometry = ScanGeometry::default();
    let scan = LaserScan::new(0, 0.0, vec![geometry.max_range; geometry.num_beams]);
    let odom = OdometryFrame::new(0, 0.0, 0.0, 0.0, 0.0);
    let seq = ScanSequence::new(geometry, vec![scan], vec![odom], BTreeMap::from([(0, annotations)])).unwrap();
    let stem = dir.join("fixture");
    write_sequence(&seq, &stem).unwrap();
    let loaded = load_sequence(&SequencePaths::from_stem(&stem), &geometry, LoadOptions::default()).unwrap();
    assert_eq!(loaded, seq);
    stem
}

fn summary(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("summary.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

#[test]
fn perfect_detections_score_full_marks() {
    let tmp = tempfile::tempdir().unwrap();
    let anns: Vec<Annotation> = ClassId::FOREGROUND
        .iter()
        .enumerate()
        .map(|(k, &c)| Annotation::new(0, c, 2.0 + k as f64, 1.0).unwrap())
        .collect();
    let stem = one_frame_sequence(tmp.path(), anns.clone());
    let dets: Vec<Detection> = anns
        .iter()
        .map(|a| {
            let mut p = [0.0; 3];
            p[a.class_id.fg_index().unwrap()] = 1.0;
            Detection::new(a.x, a.y, p, 5)
        })
        .collect();
    let det_file = tmp.path().join("dets.txt");
    write_detections(&det_file, &BTreeMap::from([(0, dets)])).unwrap();
    let out = tmp.path().join("eval");
    ok(&["eval", "--detections", s(&det_file), "--sequence", s(&stem), "--out", s(&out)]);
    let rows = summary(&out);
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r[2] == "100.0" && r[3] == "100.0"), "{rows:?}");
    for c in ["wc", "wa", "wp", "agnostic"] {
        assert!(out.join(format!("pr_{c}_r0.5.tsv")).exists());
        assert!(out.join(format!("pr_{c}_r0.3.tsv")).exists());
    }
}

#[test]
fn three_detection_fixture_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = |x: f64| Annotation::new(0, ClassId::Person, x, 0.0).unwrap();
    let stem = one_frame_sequence(tmp.path(), vec![ann(1.0), ann(3.0)]);
    let det = |x: f64, conf: f64| Detection::new(x, 0.0, [(1.0 - conf) / 2.0, (1.0 - conf) / 2.0, conf], 3);
    let det_file = tmp.path().join("dets.txt");
    write_detections(&det_file, &BTreeMap::from([(0, vec![det(1.0, 0.9), det(5.0, 0.8), det(3.0, 0.7)])])).unwrap();
    let out = tmp.path().join("eval");
    ok(&[
        "eval", "--detections", s(&det_file), "--sequence", s(&stem), "--out", s(&out), "--radii", "0.5", "--mode",
        "class",
    ]);
    let rows = summary(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][..], ["wp", "0.5", "79.2", "80.0", "50.0"]);
}

#[test]
fn eval_rejects_detections_for_unknown_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let stem = one_frame_sequence(tmp.path(), vec![Annotation::new(0, ClassId::Person, 1.0, 0.0).unwrap()]);
    let det_file = tmp.path().join("dets.txt");
    write_detections(&det_file, &BTreeMap::from([(9, vec![])])).unwrap();
    let out = drow(&["eval", "--detections", s(&det_file), "--sequence", s(&stem), "--out", s(&tmp.path().join("e"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error kind=seq_mismatch"));
}

#[test]
fn stats_counts_synthetic_splits() {
    let tmp = tempfile::tempdir().unwrap();
    synth(&tmp.path().join("train"), 400, 1);
    synth(&tmp.path().join("test"), 200, 2);
    let out = ok(&["stats", "--data", s(tmp.path())]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("train\t1\t") || l.starts_with("test\t1\t")).collect();
    assert_eq!(rows.len(), 2, "{text}");
    assert!(rows[0].starts_with("train\t1\t400\t20\t"));
    assert!(rows[1].starts_with("test\t1\t200\t20\t"));
}
