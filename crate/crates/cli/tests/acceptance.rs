//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS] criterion N` line (run with `-- --nocapture` to see them;
//! a failed assert marks the criterion failed).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use rgpr_core::checkpoint;
use rgpr_core::eval::{average_precision, oks, Annotation, AnnotationSet, GtKeypoint, OksConfig, PredictedPose};
use rgpr_core::decode::{decode, Keypoint};
use rgpr_core::gpr::{gpr_step, GprStep};
use rgpr_core::gradcheck;
use rgpr_core::params::Binder;
use rgpr_core::posenet::{build, Model, NetworkConfig};
use rgpr_core::ram::{ram_fuse, ram_fuse_uniform, ram_weights, RamParams};
use rgpr_core::rng::Rng;
use rgpr_core::tape::Tape;
use rgpr_core::tensor::{Shape, Tensor};
use rgpr_core::train::{sgdr_lr, TrainConfig};

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
    let dir = std::env::temp_dir().join(format!("rgpr_acc_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

// ── Criterion 1: gradient suite ─────────────────────────────────────

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    for r in gradcheck::check_ops(&gradcheck::DEFAULT_SEEDS) {
        assert!(r.tol <= 1e-4);
        if !r.passed() {
            failures.push(format!("{} ({:.3e})", r.group, r.max_rel_err));
        }
    }
    for r in gradcheck::check_ram(&gradcheck::DEFAULT_SEEDS)
        .into_iter()
        .chain(gradcheck::check_gpr(&gradcheck::DEFAULT_SEEDS))
    {
        assert!(r.tol <= 1e-4);
        if !r.passed() {
            failures.push(format!("{} ({:.3e})", r.group, r.max_rel_err));
        }
    }
    for r in gradcheck::check_full(&gradcheck::FULL_SEEDS) {
        assert!(r.tol <= 1e-3);
        if !r.passed() {
            failures.push(format!("{} ({:.3e})", r.group, r.max_rel_err));
        }
    }
    assert!(failures.is_empty(), "gradient failures: {failures:?}");
    let elapsed = t0.elapsed();
    assert!(
        elapsed.as_secs() < 300,
        "gradient suite took {elapsed:?}, budget is 5 min"
    );
    println!(
        "[PASS] criterion 1: every operator plus fusion/refinement/full-network paths \
         pass finite-difference checks over 5 seeds in {elapsed:?}"
    );
}

// ── Criterion 2: equation fidelity ──────────────────────────────────

#[test]
fn criterion_2_equation_fidelity() {
    // softmax + affine closed forms
    let e = [1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()];
    let w = ram_weights(&e, &[3.0, 3.0, 3.0], &[0.1, 0.1, 0.1]).unwrap();
    assert!((w[0] - 0.6).abs() < 1e-12 && (w[1] - 1.1).abs() < 1e-12 && (w[2] - 1.6).abs() < 1e-12);
    let beta_only = ram_weights(&[5.0f64, -3.0], &[0.0, 0.0], &[2.5, -1.25]).unwrap();
    assert_eq!(beta_only, vec![2.5, -1.25], "omega = 0 must return beta exactly");

    // attention with (omega=0, beta=1) degenerates to uniform sum fusion
    let mut rng = Rng::new(1);
    let mut params = RamParams::<f64>::new(4, 3, vec![1, 2, 3], true, &mut rng);
    let inputs: Vec<Tensor<f64>> = (0..3)
        .map(|i| {
            Tensor::random_uniform(
                Shape::new(2, 4 << i, 16 >> i, 16 >> i),
                -1.0,
                1.0,
                &mut rng,
            )
        })
        .collect();
    let uniform = ram_fuse_uniform(&inputs, &params).unwrap();
    for row in &mut params.edges {
        for edge in row {
            let att = edge.attention.as_mut().unwrap();
            att.omega = Tensor::scalar(0.0);
            att.beta = Tensor::scalar(1.0);
        }
    }
    let (fused, _) = ram_fuse(&inputs, &params).unwrap();
    for (u, f) in uniform.iter().zip(&fused) {
        assert_eq!(u, f, "uniform and (0,1)-affine fusion must agree elementwise");
    }

    // gpr_step against its compositional oracle, 20 random instances
    for seed in 0..20u64 {
        let mut rng = Rng::new(1000 + seed);
        let step = GprStep::<f64>::init(8, 4, &mut rng);
        let x_k = Tensor::random_uniform(Shape::new(1, 8, 4, 3), -1.0, 1.0, &mut rng);
        let x_km1 = Tensor::random_uniform(Shape::new(1, 4, 8, 6), -1.0, 1.0, &mut rng);
        let got = gpr_step(&x_k, &x_km1, &step).unwrap();

        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(&x_k);
        let b = tape.constant(&x_km1);
        let mut binder = Binder::new(&mut tape);
        let dc = step.deconv.bind(&mut binder, "d");
        let ip = step.interp_proj.bind(&mut binder, "i");
        let mg = step.merge.bind(&mut binder, "m");
        drop(binder);
        let up1 = dc.apply(&mut tape, a).unwrap();
        let rs = tape.bilinear_resize(a, 8, 6).unwrap();
        let up2 = ip.apply(&mut tape, rs).unwrap();
        let up = tape.add(up1, up2).unwrap();
        let cat = tape.concat_channels(up, b).unwrap();
        let conv = mg.apply(&mut tape, cat).unwrap();
        let want = tape.relu(conv);
        for (x, y) in got.data().iter().zip(tape.value(want).data()) {
            assert!((x - y).abs() < 1e-6, "seed {seed}: {x} vs {y}");
        }
    }
    println!("[PASS] criterion 2: fusion weights, uniform-sum degeneration, and refinement steps match closed forms");
}

// ── Criterion 3: shape contract ─────────────────────────────────────

#[test]
fn criterion_3_shape_contract() {
    for &width in &[4usize, 32, 48] {
        for &stages in &[2usize, 3, 4] {
            for &(h, w) in &[(64usize, 48usize), (256, 192)] {
                let cfg = NetworkConfig {
                    width,
                    num_stages: stages,
                    blocks_per_stage: 1,
                    input_h: h,
                    input_w: w,
                    num_keypoints: 6,
                    ..NetworkConfig::default()
                };
                let div = 4usize << (stages - 1);
                let expect_valid = h % div == 0 && w % div == 0;
                match cfg.validate() {
                    Ok(()) => {
                        assert!(expect_valid, "w{width} s{stages} {h}x{w} should be invalid");
                        let model: Model<f32> = build(&cfg, 1).unwrap();
                        let n = if h == 64 { 2 } else { 1 };
                        let img = Tensor::zeros(Shape::new(n, 3, h, w));
                        let (hm, _) = model.forward(&img).unwrap();
                        assert_eq!(
                            hm.shape(),
                            Shape::new(n, 6, h / 4, w / 4),
                            "w{width} s{stages} {h}x{w}"
                        );
                    }
                    Err(rgpr_core::Error::InvalidConfig { violations }) => {
                        assert!(!expect_valid, "w{width} s{stages} {h}x{w} should be valid");
                        assert!(
                            violations.iter().any(|v| v.contains("divisible")),
                            "violation must be named: {violations:?}"
                        );
                    }
                    Err(other) => panic!("unexpected error: {other}"),
                }
            }
        }
    }
    println!("[PASS] criterion 3: forward output is (n, K, H/4, W/4) across the width/stage/input grid; invalid configs rejected with named violations");
}

// ── Criterion 4: overfit convergence ────────────────────────────────

#[test]
fn criterion_4_overfit_convergence() {
    let dir = workdir("overfit");
    let cfg = "\
width = 8
num_stages = 3
blocks_per_stage = 1
input_h = 64
input_w = 48
num_keypoints = 6
lr0 = 0.6
sgdr_t0 = 100
sgdr_tmul = 2
eta_min = 0
batch_size = 1
epochs = 300
sigma = 2
flip = false
cutout = false
scale_jitter = 0
rotation_max = 0
dataset_size = 16
dataset_seed = 1234
oks_k = 0.2
seed = 11
";
    fs::write(dir.join("overfit.cfg"), cfg).unwrap();
    let t0 = Instant::now();
    let train = run_in(&dir, &["train", "--config", "overfit.cfg", "--out", "run"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));

    let metrics = fs::read_to_string(dir.join("run/metrics.log")).unwrap();
    let loss_of = |line: &str| -> f64 {
        line.split_whitespace()
            .find_map(|f| f.strip_prefix("loss="))
            .expect("loss field")
            .parse()
            .expect("loss value")
    };
    let first = loss_of(metrics.lines().next().unwrap());
    let last = loss_of(metrics.lines().last().unwrap());
    assert!(
        last < 0.1 * first,
        "final MSE {last} must be below 10% of epoch-0 MSE {first}"
    );

    let eval = run_in(
        &dir,
        &["eval", "--checkpoint", "run/checkpoint.rgpr", "--synthetic-seed", "1234", "--samples", "16"],
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let out = String::from_utf8_lossy(&eval.stdout);
    let mean_ap: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("mean\t"))
        .expect("mean AP row")
        .parse()
        .unwrap();
    assert!(mean_ap >= 0.9, "train-set mean AP {mean_ap} must be >= 0.9");
    let elapsed = t0.elapsed();
    assert!(
        elapsed.as_secs() < 600,
        "overfit run took {elapsed:?}, budget is 10 min"
    );
    println!(
        "[PASS] criterion 4: 300-epoch overfit reaches loss ratio {:.4} and train AP {mean_ap:.3} in {elapsed:?}",
        last / first
    );
}

// ── Criterion 5: decode and metric oracles ──────────────────────────

/// Hand-rule oracle for the quarter-offset decode of a 3x3 patch whose
/// center is the strict maximum.
fn decode_oracle_3x3(patch: &[[f64; 3]; 3]) -> (f64, f64) {
    let x_off = {
        let (l, r) = (patch[1][0], patch[1][2]);
        if r > l {
            0.25
        } else if l > r {
            -0.25
        } else {
            0.0
        }
    };
    let y_off = {
        let (u, d) = (patch[0][1], patch[2][1]);
        if d > u {
            0.25
        } else if u > d {
            -0.25
        } else {
            0.0
        }
    };
    (1.0 + x_off, 1.0 + y_off)
}

#[test]
fn criterion_5_decode_and_metric_oracles() {
    // exhaustive orderings of the four axis neighbors, ties included
    let levels = [1.0f64, 2.0, 3.0];
    let mut cases = 0;
    for &l in &levels {
        for &r in &levels {
            for &u in &levels {
                for &d in &levels {
                    let patch = [[0.0, u, 0.0], [l, 9.0, r], [0.0, d, 0.0]];
                    let mut t = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3));
                    for (y, row) in patch.iter().enumerate() {
                        for (x, &v) in row.iter().enumerate() {
                            t.set(0, 0, y, x, v);
                        }
                    }
                    let kp = decode(&t, 0, 0).unwrap();
                    let (wx, wy) = decode_oracle_3x3(&patch);
                    assert_eq!((kp.x, kp.y), (wx, wy), "patch {patch:?}");
                    assert_eq!(kp.score, 9.0);
                    cases += 1;
                }
            }
        }
    }
    assert_eq!(cases, 81);
    // strict permutations of four distinct neighbor values
    let vals = [1.0f64, 2.0, 3.0, 4.0];
    let mut perms = 0;
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for e in 0..4 {
                    if [a, b, c, e].iter().collect::<std::collections::HashSet<_>>().len() != 4 {
                        continue;
                    }
                    let patch = [
                        [0.0, vals[c], 0.0],
                        [vals[a], 9.0, vals[b]],
                        [0.0, vals[e], 0.0],
                    ];
                    let mut t = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3));
                    for (y, row) in patch.iter().enumerate() {
                        for (x, &v) in row.iter().enumerate() {
                            t.set(0, 0, y, x, v);
                        }
                    }
                    let kp = decode(&t, 0, 0).unwrap();
                    let (wx, wy) = decode_oracle_3x3(&patch);
                    assert_eq!((kp.x, kp.y), (wx, wy));
                    perms += 1;
                }
            }
        }
    }
    assert_eq!(perms, 24);

    // OKS closed form on 100 random cases
    let mut rng = Rng::new(9);
    for _ in 0..100 {
        let k = rng.uniform(0.05, 0.4);
        let area = rng.uniform(100.0, 5000.0);
        let n_kp = 1 + rng.next_usize(6);
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..n_kp {
            let (gx, gy) = (rng.uniform(0.0, 200.0), rng.uniform(0.0, 200.0));
            let v = [0u8, 1, 2][rng.next_usize(3)];
            gts.push(GtKeypoint { x: gx, y: gy, visibility: v });
            preds.push(Keypoint {
                x: gx + rng.uniform(-20.0, 20.0),
                y: gy + rng.uniform(-20.0, 20.0),
                score: 1.0,
            });
        }
        let ann = Annotation { image_id: 0, keypoints: gts.clone(), area };
        let cfg = OksConfig::uniform(n_kp, k);
        let got = oks(&preds, &ann, &cfg);
        // independent closed form
        let mut sum = 0.0;
        let mut labeled = 0;
        for (p, g) in preds.iter().zip(&gts) {
            if g.visibility > 0 {
                let d2 = (p.x - g.x) * (p.x - g.x) + (p.y - g.y) * (p.y - g.y);
                sum += (-d2 / (2.0 * area * k * k)).exp();
                labeled += 1;
            }
        }
        let want = if labeled == 0 { 0.0 } else { sum / labeled as f64 };
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    // AP vs brute-force PR integration on constructed fixtures
    let fixture_targets: [&[f64]; 10] = [
        &[1.0, 1.0, 1.0],
        &[0.1, 0.1, 0.1],
        &[0.95, 0.60, 0.80, 0.74, 0.76, 0.99, 0.10, 0.75, 0.90, 0.30],
        &[0.74, 0.76, 0.74, 0.76],
        &[0.80, 0.70],
        &[0.76, 0.74, 0.90, 0.10, 0.75],
        &[0.50, 0.75, 0.95],
        &[0.99, 0.01],
        &[0.73, 0.77, 0.73, 0.77, 0.73, 0.77],
        &[0.60, 0.80, 0.70, 0.90],
    ];
    for (fi, targets) in fixture_targets.iter().enumerate() {
        let area = 640.0;
        let k = 0.25;
        let mut anns = Vec::new();
        let mut preds = Vec::new();
        for (i, &target) in targets.iter().enumerate() {
            let d = if target >= 1.0 {
                0.0
            } else {
                (-2.0 * area * k * k * target.ln()).sqrt()
            };
            anns.push(Annotation {
                image_id: i as u64,
                keypoints: vec![GtKeypoint { x: 100.0, y: 100.0, visibility: 2 }],
                area,
            });
            preds.push(PredictedPose {
                image_id: i as u64,
                keypoints: vec![Keypoint { x: 100.0 + d, y: 100.0, score: 1.0 }],
                score: 1.0 - 0.01 * i as f64,
            });
        }
        let anns = AnnotationSet { annotations: anns };
        let cfg = OksConfig {
            k: vec![k],
            thresholds: vec![0.5, 0.75, 0.9],
        };
        let got = average_precision(&preds, &anns, &cfg).unwrap();
        let oks_ranked: Vec<f64> = preds
            .iter()
            .map(|p| oks(&p.keypoints, &anns.annotations[p.image_id as usize], &cfg))
            .collect();
        for &(thr, ap) in &got.per_threshold {
            let want = brute_force_ap(&oks_ranked, targets.len(), thr);
            assert_eq!(ap, want, "fixture {fi}, threshold {thr}");
        }
    }
    println!("[PASS] criterion 5: decode matches the exhaustive 3x3 hand oracle, OKS matches closed form (100 cases), AP matches brute-force PR integration (10 fixtures)");
}

/// Independent PR integration: for each of 101 recall levels, take the
/// best precision over every rank cutoff achieving at least that recall.
fn brute_force_ap(oks_ranked: &[f64], npos: usize, thr: f64) -> f64 {
    let n = oks_ranked.len();
    let mut total = 0.0;
    for want_recall in (0..=100).map(|r| r as f64 / 100.0) {
        let mut best = 0.0f64;
        for cut in 1..=n {
            let tp = oks_ranked[..cut].iter().filter(|&&o| o >= thr).count();
            if tp as f64 / npos as f64 >= want_recall - 1e-12 {
                for cut2 in cut..=n {
                    let tp2 = oks_ranked[..cut2].iter().filter(|&&o| o >= thr).count();
                    best = best.max(tp2 as f64 / cut2 as f64);
                }
                break;
            }
        }
        total += best;
    }
    total / 101.0
}

// ── Criterion 6: SGDR schedule ──────────────────────────────────────

#[test]
fn criterion_6_sgdr_schedule() {
    let cfg = TrainConfig {
        lr0: 0.001,
        sgdr_t0: 16,
        sgdr_tmul: 2,
        eta_min: 0.0,
        ..TrainConfig::defaults(256)
    };
    assert!((sgdr_lr(0.0, &cfg) - 0.001).abs() < 1e-12);
    assert!((sgdr_lr(8.0, &cfg) - 0.0005).abs() < 1e-12);
    assert!((sgdr_lr(16.0, &cfg) - 0.001).abs() < 1e-12);
    // cycle boundaries at 16, 48, 112: lr snaps back to lr0 exactly
    for boundary in [16.0, 48.0, 112.0] {
        assert!((sgdr_lr(boundary, &cfg) - 0.001).abs() < 1e-12);
        let before = sgdr_lr(boundary - 1e-6, &cfg);
        assert!(before < 1e-8, "lr just before {boundary} is annealed, got {before}");
    }
    println!("[PASS] criterion 6: schedule hits lr(0)=lr(16)=0.001, lr(8)=0.0005, boundaries at 16/48/112, exact to 1e-12");
}

// ── Criterion 7: ablation harness ───────────────────────────────────

#[test]
fn criterion_7_ablation_harness() {
    let dir = workdir("ablate");
    let cfg = "\
width = 4
num_stages = 2
blocks_per_stage = 1
input_h = 64
input_w = 48
num_keypoints = 4
lr0 = 0.5
sgdr_t0 = 100
sgdr_tmul = 2
batch_size = 1
epochs = 20
sigma = 2
flip = false
scale_jitter = 0
rotation_max = 0
cutout_holes = 1
cutout_size = 8
dataset_size = 8
dataset_seed = 77
seed = 5
";
    fs::write(dir.join("ablate.cfg"), cfg).unwrap();
    let t0 = Instant::now();
    let r = run_in(&dir, &["ablate", "--config", "ablate.cfg", "--out", "grid"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 5400, "grid took {elapsed:?}, budget is 90 min");

    let out = String::from_utf8_lossy(&r.stdout);
    let rows: Vec<Vec<String>> = out
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    assert_eq!(rows.len(), 8, "grid must have 8 configurations:\n{out}");
    for row in &rows {
        assert_eq!(row.len(), 6, "malformed row {row:?}");
        let _: usize = row[3].parse().expect("param count");
        let _: f64 = row[4].parse().expect("final loss");
        let _: f64 = row[5].parse().expect("mean AP");
    }
    // attention-off rows have strictly fewer parameters for every head
    for head in ["gpr", "rescale_sum"] {
        let params_of = |att: &str| -> usize {
            rows.iter()
                .find(|r| r[0] == att && r[1] == head)
                .expect("row present")[3]
                .parse()
                .unwrap()
        };
        assert!(
            params_of("off") < params_of("on"),
            "attention-off must shrink the {head} model"
        );
    }
    println!("[PASS] criterion 7: ablation grid ran 8 configurations in {elapsed:?} with a well-formed table and strictly smaller attention-off models");
}

// ── Criterion 8: serialization ──────────────────────────────────────

#[test]
fn criterion_8_checkpoint_bit_exactness() {
    let cfg = NetworkConfig {
        width: 8,
        num_stages: 3,
        blocks_per_stage: 2,
        input_h: 64,
        input_w: 48,
        num_keypoints: 6,
        ..NetworkConfig::default()
    };
    let model: Model<f32> = build(&cfg, 123).unwrap();
    let bytes_a = checkpoint::save_bytes(&model).unwrap();
    let reloaded = checkpoint::load_bytes(&bytes_a).unwrap();
    let bytes_b = checkpoint::save_bytes(&reloaded).unwrap();
    assert_eq!(bytes_a, bytes_b, "save -> load -> save must be bit-identical");

    let mut rng = Rng::new(5);
    let img = Tensor::<f32>::random_uniform(Shape::new(1, 3, 64, 48), 0.0, 1.0, &mut rng);
    let (a, _) = model.forward(&img).unwrap();
    let (b, _) = reloaded.forward(&img).unwrap();
    assert!(
        a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
        "reloaded forward must be bit-identical"
    );
    println!("[PASS] criterion 8: checkpoint round-trip is bit-identical in bytes and in forward outputs");
}

// ── Criterion 9: flip-average symmetry ──────────────────────────────

#[test]
fn criterion_9_flip_average_symmetry() {
    let cfg = NetworkConfig {
        width: 8,
        num_stages: 2,
        blocks_per_stage: 1,
        input_h: 64,
        input_w: 48,
        num_keypoints: 4,
        ..NetworkConfig::default()
    };
    let model: Model<f32> = build(&cfg, 31).unwrap();
    let mut rng = Rng::new(32);
    let half = Tensor::<f32>::random_uniform(Shape::new(1, 3, 64, 24), 0.0, 1.0, &mut rng);
    let mut img = Tensor::zeros(Shape::new(1, 3, 64, 48));
    for c in 0..3 {
        for y in 0..64 {
            for x in 0..24 {
                let v = half.at(0, c, y, x);
                img.set(0, c, y, x, v);
                img.set(0, c, y, 47 - x, v);
            }
        }
    }
    let avg = rgpr_core::decode::flip_average(&model, &img, &[]).unwrap();
    let mirrored = avg.hflip();
    let max_dev = avg
        .data()
        .iter()
        .zip(mirrored.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_dev < 1e-5, "mirror deviation {max_dev}");
    println!("[PASS] criterion 9: flip-averaged heatmap of a mirror-symmetric image is mirror-symmetric (max deviation {max_dev:.2e})");
}
