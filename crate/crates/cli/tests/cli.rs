//! End-to-end checks of the `rgpr` binary: artifacts, determinism,
//! exit codes, and flag contracts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rgpr")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rgpr_cli_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_CFG: &str = "\
width = 4
num_stages = 2
blocks_per_stage = 1
input_h = 64
input_w = 48
num_keypoints = 4
epochs = 2
batch_size = 2
dataset_size = 4
flip = false
cutout = false
scale_jitter = 0
rotation_max = 0
";

#[test]
fn train_writes_artifacts_and_is_seed_deterministic() {
    let dir = workdir("determinism");
    fs::write(dir.join("tiny.cfg"), TINY_CFG).unwrap();
    for out in ["run_a", "run_b"] {
        let r = run_in(
            &dir,
            &["train", "--config", "tiny.cfg", "--seed", "7", "--out", out, "--dump-attention"],
        );
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for file in ["checkpoint.rgpr", "metrics.log", "attention.txt"] {
        let a = fs::read(dir.join("run_a").join(file)).unwrap();
        let b = fs::read(dir.join("run_b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical seeded runs");
    }
    // config echoes agree except for the output directory itself
    let strip = |p: &Path| -> String {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("out_dir"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        strip(&dir.join("run_a/config.txt")),
        strip(&dir.join("run_b/config.txt"))
    );
    // a different seed must change the checkpoint
    let r = run_in(
        &dir,
        &["train", "--config", "tiny.cfg", "--seed", "8", "--out", "run_c"],
    );
    assert!(r.status.success());
    assert_ne!(
        fs::read(dir.join("run_a/checkpoint.rgpr")).unwrap(),
        fs::read(dir.join("run_c/checkpoint.rgpr")).unwrap()
    );
}

#[test]
fn zero_epoch_training_checkpoints_the_initialization() {
    let dir = workdir("zero_epochs");
    fs::write(dir.join("tiny.cfg"), TINY_CFG).unwrap();
    let r = run_in(
        &dir,
        &["train", "--config", "tiny.cfg", "--seed", "7", "--epochs", "0", "--out", "run"],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let cfg = rgpr_core::posenet::NetworkConfig {
        width: 4,
        num_stages: 2,
        blocks_per_stage: 1,
        input_h: 64,
        input_w: 48,
        num_keypoints: 4,
        ..rgpr_core::posenet::NetworkConfig::default()
    };
    let fresh: rgpr_core::posenet::Model<f32> = rgpr_core::posenet::build(&cfg, 7).unwrap();
    let want = rgpr_core::checkpoint::save_bytes(&fresh).unwrap();
    let got = fs::read(dir.join("run/checkpoint.rgpr")).unwrap();
    assert_eq!(got, want, "epoch-0 checkpoint must equal the initialization");
}

#[test]
fn echoed_config_reparses_identically() {
    let dir = workdir("roundtrip");
    fs::write(dir.join("tiny.cfg"), TINY_CFG).unwrap();
    let r = run_in(
        &dir,
        &["train", "--config", "tiny.cfg", "--seed", "9", "--out", "run", "lr0=0.125"],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let echoed = fs::read_to_string(dir.join("run/config.txt")).unwrap();
    let parsed = rgpr_cli::config::RunConfig::from_kv(&echoed).unwrap();
    assert_eq!(parsed.to_kv(), echoed);
    assert_eq!(parsed.train.lr0, 0.125);
    assert_eq!(parsed.seed, 9);
}

#[test]
fn eval_flip_flag_changes_the_inference_path() {
    let dir = workdir("flip_flag");
    fs::write(dir.join("tiny.cfg"), TINY_CFG).unwrap();
    let r = run_in(
        &dir,
        &["train", "--config", "tiny.cfg", "--seed", "3", "--epochs", "0", "--out", "run"],
    );
    assert!(r.status.success());
    let with_flip = run_in(
        &dir,
        &["eval", "--checkpoint", "run/checkpoint.rgpr", "--synthetic-seed", "11", "--samples", "3"],
    );
    let without = run_in(
        &dir,
        &[
            "eval", "--checkpoint", "run/checkpoint.rgpr", "--synthetic-seed", "11",
            "--samples", "3", "--no-flip",
        ],
    );
    assert!(with_flip.status.success() && without.status.success());
    let a = String::from_utf8_lossy(&with_flip.stdout);
    assert!(a.contains("mean\t"), "table must have a mean row: {a}");
    let b = String::from_utf8_lossy(&without.stdout);
    assert!(b.contains("mean\t"), "table must have a mean row: {b}");
    // a randomly initialized model is not flip-equivariant, so the
    // averaged path must decode at least one keypoint differently
    let preds_a = run_in(
        &dir,
        &["eval", "--checkpoint", "run/checkpoint.rgpr", "--synthetic-seed", "11", "--samples", "3", "--write-predictions", "pa.json"],
    );
    let preds_b = run_in(
        &dir,
        &["eval", "--checkpoint", "run/checkpoint.rgpr", "--synthetic-seed", "11", "--samples", "3", "--no-flip", "--write-predictions", "pb.json"],
    );
    assert!(preds_a.status.success() && preds_b.status.success());
    assert_ne!(
        fs::read(dir.join("pa.json")).unwrap(),
        fs::read(dir.join("pb.json")).unwrap(),
        "flip-averaged predictions should differ for a non-equivariant model"
    );
}

#[test]
fn eval_of_ground_truth_predictions_scores_perfect_ap() {
    let dir = workdir("gt_preds");
    // hand-built fixture: predictions exactly equal the ground truth
    let anns = r#"{"annotations":[
        {"image_id":0,"area":900.0,"keypoints":[10,20,2, 30,40,2, 50,12,1]},
        {"image_id":1,"area":400.0,"keypoints":[5,6,2, 7,8,0, 9,10,2]}
    ]}"#;
    let preds = r#"{"annotations":[
        {"image_id":0,"keypoints":[10,20,1.0, 30,40,1.0, 50,12,1.0]},
        {"image_id":1,"keypoints":[5,6,1.0, 7,8,1.0, 9,10,1.0]}
    ]}"#;
    fs::write(dir.join("anns.json"), anns).unwrap();
    fs::write(dir.join("preds.json"), preds).unwrap();
    let r = run_in(&dir, &["eval", "--predictions", "preds.json", "--annotations", "anns.json"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let out = String::from_utf8_lossy(&r.stdout);
    assert!(out.contains("mean\t1.000000"), "{out}");
}

#[test]
fn eval_rejects_keypoint_count_mismatch_with_named_error() {
    let dir = workdir("k_mismatch");
    fs::write(dir.join("tiny.cfg"), TINY_CFG).unwrap();
    let r = run_in(
        &dir,
        &["train", "--config", "tiny.cfg", "--seed", "2", "--epochs", "0", "--out", "run"],
    );
    assert!(r.status.success());
    // checkpoint expects 4 keypoints, annotations carry 2
    let anns = r#"{"annotations":[{"image_id":0,"area":100.0,"keypoints":[1,1,2, 2,2,2]}]}"#;
    fs::write(dir.join("anns.json"), anns).unwrap();
    let bad = run_in(
        &dir,
        &[
            "eval", "--checkpoint", "run/checkpoint.rgpr", "--synthetic-seed", "1",
            "--samples", "1", "--annotations", "anns.json",
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(
        err.contains("2 keypoints") && err.contains("expects 4"),
        "mismatch must be named: {err}"
    );
}

#[test]
fn gradcheck_scope_contract() {
    let dir = workdir("gradcheck");
    let ok = run_in(&dir, &["gradcheck", "ops"]);
    assert!(ok.status.success());
    let out = String::from_utf8_lossy(&ok.stdout);
    assert!(out.lines().filter(|l| l.ends_with("pass")).count() >= 15, "{out}");

    let bad = run_in(&dir, &["gradcheck", "everything"]);
    assert_eq!(bad.status.code(), Some(64), "unknown scope is a usage error");
}

#[test]
fn usage_errors_exit_64_and_runtime_errors_exit_1() {
    let dir = workdir("exit_codes");
    let unknown = run_in(&dir, &["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(64));

    let missing = run_in(&dir, &["train", "--config", "no_such_file.cfg"]);
    assert_eq!(missing.status.code(), Some(1));

    // invalid config content is a runtime failure with a named violation
    fs::write(dir.join("bad.cfg"), "width = 4\ninput_h = 50\ninput_w = 50\n").unwrap();
    let invalid = run_in(&dir, &["train", "--config", "bad.cfg"]);
    assert_eq!(invalid.status.code(), Some(1));
    let err = String::from_utf8_lossy(&invalid.stderr);
    assert!(err.contains("4:3"), "violation must be named: {err}");
}

#[test]
fn non_finite_training_aborts_with_named_gradient() {
    let dir = workdir("nan_abort");
    fs::write(dir.join("tiny.cfg"), TINY_CFG).unwrap();
    let r = run_in(
        &dir,
        &["train", "--config", "tiny.cfg", "--out", "run", "lr0=1e30", "--epochs", "3"],
    );
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("non-finite"), "{err}");
}
