//! End-to-end tests of the binary: exit codes, determinism, and the
//! contracts between the subcommands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmpt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        stdout(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// FNV-1a over every file's relative path and bytes, in sorted order.
fn dir_digest(dir: &Path) -> u64 {
    fn walk(dir: &Path, root: &Path, files: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .expect("readable dir")
            .map(|e| e.expect("entry").path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, root, files);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&path).expect("readable file")));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for (rel, bytes) in &files {
        eat(rel.as_bytes());
        eat(&[0]);
        eat(bytes);
        eat(&[0]);
    }
    h
}

/// Tiny flat dataset: 8px frames, one object, quick to render.
fn gen_tiny(root: &Path, clips: &str, val_clips: &str, frames: &str, seed: &str) {
    let out = run(&[
        "gen-data",
        "--out",
        root.to_str().unwrap(),
        "--style",
        "flat",
        "--clips",
        clips,
        "--val-clips",
        val_clips,
        "--frames",
        frames,
        "--image-size",
        "8",
        "--objects",
        "1",
        "--seed",
        seed,
    ]);
    assert_ok(&out);
}

const TINY_GEOMETRY: &[&str] = &[
    "--image-size", "8", "--patch", "4", "--dim", "8", "--heads", "2", "--layers", "1",
    "--head-hidden", "16",
];

/// Init-only checkpoint with the tiny geometry.
fn init_checkpoint(data: &Path, out: &Path) {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "0",
    ];
    args.extend_from_slice(TINY_GEOMETRY);
    assert_ok(&run(&args));
}

#[test]
fn gen_data_same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_tiny(&a, "1", "1", "3", "7");
    gen_tiny(&b, "1", "1", "3", "7");
    assert_eq!(dir_digest(&a), dir_digest(&b));
    let c = tmp.path().join("c");
    gen_tiny(&c, "1", "1", "3", "8");
    assert_ne!(dir_digest(&a), dir_digest(&c));
}

#[test]
fn gen_data_without_out_is_usage_error() {
    let out = run(&["gen-data", "--style", "flat"]);
    assert_code(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--out"), "stderr: {err}");
    assert!(err.to_lowercase().contains("usage"), "stderr: {err}");
}

#[test]
fn train_zero_epochs_writes_init_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "1", "1", "3", "0");
    let out_dir = tmp.path().join("run");
    init_checkpoint(&data, &out_dir);
    assert!(out_dir.join("last/config.txt").is_file());
    assert!(out_dir.join("best/config.txt").is_file());
    assert!(out_dir.join("metrics.txt").is_file());
}

#[test]
fn train_same_seed_same_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "2", "1", "3", "0");
    let train_into = |dir: &Path| {
        let mut args = vec![
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--epochs",
            "1",
            "--draws-per-epoch",
            "2",
            "--window",
            "2",
            "--schedule",
            "synthetic-only",
            "--seed",
            "3",
            "--val-settings",
            "2:1",
            "--val-slice-len",
            "3",
        ];
        args.extend_from_slice(TINY_GEOMETRY);
        assert_ok(&run(&args));
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    train_into(&a);
    train_into(&b);
    assert_eq!(
        fs::read(a.join("metrics.txt")).unwrap(),
        fs::read(b.join("metrics.txt")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("draws.txt")).unwrap(),
        fs::read(b.join("draws.txt")).unwrap()
    );
    assert_eq!(dir_digest(&a.join("last")), dir_digest(&b.join("last")));
}

#[test]
fn infer_two_frame_window_emits_two_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "1", "1", "2", "0");
    let ckpt = tmp.path().join("run");
    init_checkpoint(&data, &ckpt);
    let pred = tmp.path().join("pred");
    let ply = tmp.path().join("ply");
    let out = run(&[
        "infer",
        "--checkpoint",
        ckpt.join("last").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "val",
        "--window",
        "2",
        "--out",
        pred.to_str().unwrap(),
        "--ply",
        ply.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(stdout(&out).contains("pairs = 2, pointclouds = 4"));
    let mut names: Vec<String> = fs::read_dir(&pred)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["pred_X_0_1.mmpt", "pred_X_1_0.mmpt", "pred_Y_0_1.mmpt", "pred_Y_1_0.mmpt"]
    );
    let (points, colors) = mmpt::ply::read_ply(&ply.join("pred_X_0_1.ply")).unwrap();
    assert_eq!(points.len(), 64);
    assert_eq!(colors.len(), 64);
}

#[test]
fn extend_matches_wider_window() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "1", "1", "3", "0");
    let ckpt = tmp.path().join("run");
    init_checkpoint(&data, &ckpt);
    let ckpt_arg = ckpt.join("last");
    let wide = tmp.path().join("wide");
    let grown = tmp.path().join("grown");
    assert_ok(&run(&[
        "infer",
        "--checkpoint",
        ckpt_arg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "val",
        "--window",
        "3",
        "--out",
        wide.to_str().unwrap(),
    ]));
    assert_ok(&run(&[
        "infer",
        "--checkpoint",
        ckpt_arg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "val",
        "--window",
        "2",
        "--extend",
        "1",
        "--out",
        grown.to_str().unwrap(),
    ]));
    let mut compared = 0usize;
    for entry in fs::read_dir(&wide).unwrap() {
        let name = entry.unwrap().file_name();
        let a = mmpt::io::read_tensor::<f32>(&wide.join(&name)).unwrap();
        let b = mmpt::io::read_tensor::<f32>(&grown.join(&name)).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5, "{name:?}: {x} vs {y}");
        }
        compared += 1;
    }
    assert_eq!(compared, 12, "3 frames give 6 ordered pairs, 2 maps each");
}

#[test]
fn oracle_eval_scores_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "1", "1", "4", "0");
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--oracle",
        "--split",
        "val",
        "--slice-len",
        "4",
        "--settings",
        "2:3,2:1",
    ]);
    assert_ok(&out);
    let text = stdout(&out);
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("M@"))
        .collect();
    assert_eq!(rows.len(), 2, "stdout: {text}");
    for row in rows {
        assert!(row.ends_with("0.000000e0"), "row: {row}");
    }
}

#[test]
fn malformed_settings_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "1", "1", "3", "0");
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--oracle",
        "--settings",
        "2:6,banana",
    ]);
    assert_code(&out, 2);
}

#[test]
fn eval_needs_a_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "1", "1", "3", "0");
    let out = run(&["eval", "--data", data.to_str().unwrap()]);
    assert_code(&out, 2);
}

#[test]
fn missing_ground_truth_is_a_dataset_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "1", "1", "3", "0");
    fs::remove_file(data.join("val/clip_flat_00000/gt_Y_1_0.mmpt")).unwrap();
    let out = run(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--oracle",
        "--split",
        "val",
        "--slice-len",
        "3",
        "--settings",
        "2:1",
    ]);
    assert_code(&out, 6);
}

#[test]
fn verify_passes_clean() {
    let out = run(&["verify"]);
    assert_ok(&out);
    let text = stdout(&out);
    assert_eq!(text.matches(": PASS").count(), 10, "stdout: {text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn verify_catches_injected_causality_fault() {
    let out = run(&["verify", "--inject-causality-fault"]);
    assert_code(&out, 1);
    let text = stdout(&out);
    assert!(text.contains("VERIFY trajectory-causality: FAIL"), "stdout: {text}");
    assert!(text.contains("VERIFY equivalence-at-init: PASS"), "stdout: {text}");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("trajectory-causality"), "stderr: {err}");
}

#[test]
fn geometry_mismatch_is_a_checkpoint_error() {
    let tmp = tempfile::tempdir().unwrap();
    let small = tmp.path().join("small");
    gen_tiny(&small, "1", "1", "3", "0");
    let ckpt = tmp.path().join("run");
    init_checkpoint(&small, &ckpt);
    let big = tmp.path().join("big");
    assert_ok(&run(&[
        "gen-data",
        "--out",
        big.to_str().unwrap(),
        "--style",
        "flat",
        "--clips",
        "0",
        "--val-clips",
        "1",
        "--frames",
        "3",
        "--image-size",
        "16",
        "--objects",
        "1",
        "--seed",
        "0",
    ]));
    let out = run(&[
        "infer",
        "--checkpoint",
        ckpt.join("last").to_str().unwrap(),
        "--data",
        big.to_str().unwrap(),
        "--split",
        "val",
        "--window",
        "2",
    ]);
    assert_code(&out, 5);
}

#[test]
fn config_file_fills_defaults_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "1", "1", "3", "0");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "epochs = 0\nseed = 9\n# comment line\n").unwrap();

    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
    ];
    let out_a = tmp.path().join("a");
    args.push(out_a.to_str().unwrap());
    args.extend_from_slice(TINY_GEOMETRY);
    let out = run(&args);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("epochs = 0 (config)"), "stdout: {text}");
    assert!(text.contains("seed = 9 (config)"), "stdout: {text}");
    assert!(text.contains("lr = 0.0001 (default)"), "stdout: {text}");

    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
    ];
    let out_b = tmp.path().join("b");
    args.push(out_b.to_str().unwrap());
    args.extend_from_slice(TINY_GEOMETRY);
    let out = run(&args);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("seed = 4 (flag)"), "stdout: {text}");
    assert!(text.contains("epochs = 0 (config)"), "stdout: {text}");
}

#[test]
fn infer_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "1", "1", "3", "0");
    let ckpt = tmp.path().join("run");
    init_checkpoint(&data, &ckpt);
    let rerun = |dir: &Path| {
        assert_ok(&run(&[
            "infer",
            "--checkpoint",
            ckpt.join("last").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--split",
            "val",
            "--window",
            "2",
            "--extend",
            "1",
            "--out",
            dir.to_str().unwrap(),
        ]));
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    rerun(&a);
    rerun(&b);
    assert_eq!(dir_digest(&a), dir_digest(&b));
}
