use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmflow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmflow"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cmflow")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = cmflow(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs a failing command and returns its exit code and parsed error line.
fn fails(args: &[&str], cwd: &Path) -> (i32, serde_json::Value) {
    let out = cmflow(args, cwd);
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stderr:?}");
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    (out.status.code().unwrap(), v)
}

const SMALL_SIM: &str = r#"{"version": 1, "num_frames": 6, "static_points": 120, "movers": 2}"#;

fn small_sequence(dir: &Path, seed: u64) {
    fs::write(dir.join("sim.json"), SMALL_SIM).unwrap();
    ok(
        &[
            "simulate",
            "--config",
            "sim.json",
            "--seed",
            &seed.to_string(),
            "--out",
            "seq",
        ],
        dir,
    );
}

fn mean_row(csv_path: &Path) -> Vec<String> {
    let text = fs::read_to_string(csv_path).unwrap();
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("MEAN,"));
    last.split(',').map(str::to_string).collect()
}

#[test]
fn version_and_help_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&["--version"], dir.path());
    assert!(v.starts_with("cmflow "));
    let h = ok(&["--help"], dir.path());
    for sub in [
        "simulate",
        "labels",
        "train",
        "infer",
        "eval",
        "odometry",
        "gradcheck",
    ] {
        assert!(h.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn ground_truth_round_trip_scores_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_sequence(d, 4);
    ok(&["labels", "--seq", "seq", "--out", "seq"], d);
    ok(&["infer", "--from-truth", "--seq", "seq", "--out", "gt"], d);
    ok(
        &[
            "eval",
            "--pred",
            "gt",
            "--seq",
            "seq",
            "--out",
            "gt/metrics.csv",
        ],
        d,
    );
    let text = fs::read_to_string(d.join("gt/metrics.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "pair,epe,acc_s,acc_r,rne,mrne,srne,miou,rte,rae"
    );
    assert_eq!(text.lines().count(), 5 + 2);
    let mean = mean_row(&d.join("gt/metrics.csv"));
    assert_eq!(mean[1], "0");
    assert_eq!(mean[7], "1");
    for name in [
        "seq/manifest.simulate.json",
        "seq/manifest.labels.json",
        "gt/manifest.infer.json",
        "gt/manifest.eval.json",
    ] {
        assert!(d.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn bias_aware_labels_beat_direct_thresholding() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // The default simulator injects a per-frame RRV bias of up to 1 m/s.
    small_sequence(d, 9);
    ok(&["labels", "--seq", "seq", "--out", "aware"], d);
    ok(
        &[
            "labels",
            "--seq",
            "seq",
            "--out",
            "direct",
            "--direct-threshold",
        ],
        d,
    );
    let rows = fs::read_to_string(d.join("aware/label_quality.csv")).unwrap();
    for line in rows.lines().skip(1) {
        let cols: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|c| c.parse().unwrap())
            .collect();
        assert!(cols[0] >= cols[1], "{line}");
    }
    let aware: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("aware/manifest.labels.json")).unwrap())
            .unwrap();
    let direct: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("direct/manifest.labels.json")).unwrap())
            .unwrap();
    assert_eq!(aware["config"]["rrv_mode"], "bias_aware");
    assert_eq!(direct["config"]["rrv_mode"], "direct");
    assert_ne!(
        fs::read(d.join("aware/labels.jsonl")).unwrap(),
        fs::read(d.join("direct/labels.jsonl")).unwrap()
    );
}

#[test]
fn bad_configs_and_paths_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, e) = fails(
        &[
            "simulate",
            "--config",
            "missing.json",
            "--seed",
            "1",
            "--out",
            "x",
        ],
        d,
    );
    assert_eq!((code, e["error"].as_str().unwrap()), (1, "invalid_config"));

    fs::write(d.join("typo.json"), r#"{"version": 1, "num_frame": 4}"#).unwrap();
    let (code, e) = fails(
        &[
            "simulate",
            "--config",
            "typo.json",
            "--seed",
            "1",
            "--out",
            "x",
        ],
        d,
    );
    assert_eq!(code, 1);
    assert!(e["message"].as_str().unwrap().contains("num_frame"));

    fs::write(d.join("v2.json"), r#"{"version": 2}"#).unwrap();
    assert_eq!(
        fails(
            &["simulate", "--config", "v2.json", "--seed", "1", "--out", "x"],
            d
        )
        .0,
        1
    );

    let (code, e) = fails(
        &[
            "eval", "--pred", "nowhere", "--seq", "nowhere", "--out", "m.csv",
        ],
        d,
    );
    assert_eq!((code, e["error"].as_str().unwrap()), (1, "usage"));

    let (code, e) = fails(&["simulate", "--seed"], d);
    assert_eq!((code, e["error"].as_str().unwrap()), (1, "usage"));
    assert!(!d.join("x").exists());
}

#[test]
fn inconsistent_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_sequence(d, 2);
    ok(&["infer", "--from-truth", "--seq", "seq", "--out", "gt"], d);
    let preds = fs::read_to_string(d.join("gt/predictions.jsonl")).unwrap();
    let first_two: String = preds.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(d.join("gt/predictions.jsonl"), first_two).unwrap();
    let (code, e) = fails(
        &["eval", "--pred", "gt", "--seq", "seq", "--out", "m.csv"],
        d,
    );
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "invariant"));
    let (code, _) = fails(
        &["odometry", "--pred", "gt", "--seq", "seq", "--out", "t.csv"],
        d,
    );
    assert_eq!(code, 2);
}

#[test]
fn odometry_from_ground_truth_reproduces_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_sequence(d, 5);
    ok(&["infer", "--from-truth", "--seq", "seq", "--out", "gt"], d);
    let stdout = ok(
        &[
            "odometry",
            "--pred",
            "gt",
            "--seq",
            "seq",
            "--baseline",
            "icp",
            "--out",
            "gt/traj.csv",
        ],
        d,
    );
    assert!(
        stdout.contains("estimate: final-pose ATE 0.0000 m"),
        "{stdout}"
    );
    assert!(stdout.contains("icp: final-pose ATE"));
    let text = fs::read_to_string(d.join("gt/traj.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 1 + 3 * 4);
    assert_eq!(text.lines().count(), 1 + 6);
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|c| c.parse().unwrap())
            .collect();
        for axis in 0..4 {
            assert!((v[axis] - v[8 + axis]).abs() < 1e-9, "{line}");
        }
    }
}

fn pipeline(dir: &Path, threads_flag: bool) {
    fs::write(
        dir.join("train.json"),
        r#"{"version": 1, "epochs": 2, "num_points": 48, "batch_size": 2, "seed": 7, "model": {"scale": 0.0625}}"#,
    )
    .unwrap();
    small_sequence(dir, 11);
    ok(&["labels", "--seq", "seq", "--out", "seq"], dir);
    let mut train = vec![
        "train",
        "--data",
        "seq",
        "--config",
        "train.json",
        "--out",
        "run",
    ];
    if threads_flag {
        train.splice(0..0, ["--threads", "1"]);
    }
    ok(&train, dir);
    ok(
        &[
            "infer",
            "--ckpt",
            "run/checkpoint.bin",
            "--seq",
            "seq",
            "--out",
            "pred",
        ],
        dir,
    );
    ok(
        &[
            "eval",
            "--pred",
            "pred",
            "--seq",
            "seq",
            "--out",
            "pred/metrics.csv",
        ],
        dir,
    );
}

#[test]
fn single_threaded_pipeline_is_bit_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), true);
    pipeline(b.path(), true);
    for f in [
        "seq/frames.jsonl",
        "seq/labels.jsonl",
        "run/checkpoint.bin",
        "run/train_log.jsonl",
        "pred/metrics.csv",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let manifest = |d: &Path| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(d.join("run/manifest.train.json")).unwrap())
            .unwrap()
    };
    let (ma, mb) = (manifest(a.path()), manifest(b.path()));
    assert_eq!(ma["inputs_sha256"], mb["inputs_sha256"]);
    assert_eq!(ma["seed"], 7);
    assert_eq!(ma["config"]["model"]["scale"], 0.0625);
}

#[test]
fn thread_count_comes_from_the_environment_too() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_cmflow"))
        .args(["simulate", "--seed", "1", "--out", "seq"])
        .env("CMFLOW_THREADS", "0")
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_cmflow"))
        .args(["--threads", "2", "--version"])
        .env("CMFLOW_THREADS", "1")
        .current_dir(d)
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn reruns_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_sequence(d, 3);
    let first = fs::read(d.join("seq/frames.jsonl")).unwrap();
    let hash = |d: &Path| -> serde_json::Value {
        let m: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(d.join("seq/manifest.simulate.json")).unwrap(),
        )
        .unwrap();
        m["inputs_sha256"].clone()
    };
    let h1 = hash(d);
    small_sequence(d, 3);
    assert_eq!(first, fs::read(d.join("seq/frames.jsonl")).unwrap());
    assert_eq!(h1, hash(d));
    let leftovers: Vec<_> = fs::read_dir(d.join("seq"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with('.'))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn gradcheck_passes_on_a_small_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(
        &[
            "gradcheck",
            "--scale",
            "0.0625",
            "--points",
            "16",
            "--per-param",
            "1",
            "--out",
            "gc",
        ],
        d,
    );
    assert!(stdout.contains("max relative error"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("gc/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 6);
    let (code, e) = fails(
        &[
            "gradcheck",
            "--scale",
            "0.0625",
            "--points",
            "16",
            "--per-param",
            "1",
            "--tolerance",
            "1e-30",
        ],
        d,
    );
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "check_failed"));
}
