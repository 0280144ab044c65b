//! Training harness: Gaussian heatmap targets, MSE loss, plain SGD
//! driven by a cosine-annealing warm-restart schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::posenet::Model;
use crate::ram::AttentionReport;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::synth::{augment, AugmentConfig, KeypointGt, SyntheticSample};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub sgdr_t0: usize,
    pub sgdr_tmul: usize,
    pub eta_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Target Gaussian std in heatmap pixels.
    pub sigma: f64,
    pub flip: bool,
    pub scale_jitter: f64,
    pub rotation_max: f64,
    pub cutout: bool,
    pub cutout_holes: usize,
    pub cutout_size: usize,
    pub flip_pairs: Vec<(usize, usize)>,
}

impl TrainConfig {
    /// Desk-scale defaults; `input_h` sizes the cutout hole (h / 8).
    pub fn defaults(input_h: usize) -> Self {
        TrainConfig {
            lr0: 0.001,
            sgdr_t0: 16,
            sgdr_tmul: 2,
            eta_min: 0.0,
            batch_size: 4,
            epochs: 48,
            sigma: 2.0,
            flip: true,
            scale_jitter: 0.35,
            rotation_max: 45.0,
            cutout: true,
            cutout_holes: 1,
            cutout_size: input_h / 8,
            flip_pairs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.lr0 <= 0.0 || self.lr0.is_nan() {
            violations.push("lr0 must be > 0".to_string());
        }
        if self.sgdr_t0 < 1 {
            violations.push("sgdr_t0 must be >= 1".to_string());
        }
        if self.sgdr_tmul < 1 {
            violations.push("sgdr_tmul must be >= 1".to_string());
        }
        if self.batch_size < 1 {
            violations.push("batch_size must be >= 1".to_string());
        }
        if self.sigma <= 0.0 || self.sigma.is_nan() {
            violations.push("sigma must be > 0".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { violations })
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            flip: self.flip,
            scale_jitter: self.scale_jitter,
            rotation_max: self.rotation_max,
            cutout: self.cutout,
            cutout_holes: self.cutout_holes,
            cutout_size: self.cutout_size,
            flip_pairs: self.flip_pairs.clone(),
        }
    }
}

// ── Learning-rate schedule ──────────────────────────────────────────

/// Cosine annealing with warm restarts. Cycle j has length
/// `t0 * tmul^j`; within a cycle, `lr = eta_min + (lr0 - eta_min) *
/// (1 + cos(pi * t / T_j)) / 2`, restarting to `lr0` at each boundary.
pub fn sgdr_lr(epoch_fraction: f64, cfg: &TrainConfig) -> f64 {
    let mut tau = epoch_fraction.max(0.0);
    let mut cycle = cfg.sgdr_t0 as f64;
    while tau >= cycle {
        tau -= cycle;
        cycle *= cfg.sgdr_tmul as f64;
    }
    cfg.eta_min
        + 0.5 * (cfg.lr0 - cfg.eta_min) * (1.0 + (std::f64::consts::PI * tau / cycle).cos())
}

// ── Targets and loss ────────────────────────────────────────────────

/// Gaussian-peak target heatmap, one channel per keypoint:
/// `exp(-((x - x_k)^2 + (y - y_k)^2) / (2 sigma^2))` evaluated at pixel
/// centers, so the heatmap keeps the keypoint's sub-pixel position (the
/// quarter-offset decode reads it back from neighbor asymmetry).
/// Invisible keypoints produce an all-zero channel. Keypoint
/// coordinates are in heatmap pixels.
pub fn render_target(
    keypoints: &[KeypointGt],
    heatmap_h: usize,
    heatmap_w: usize,
    sigma: f64,
) -> Tensor<f32> {
    let k = keypoints.len();
    let mut out = Tensor::zeros(Shape::new(1, k, heatmap_h, heatmap_w));
    let denom = 2.0 * sigma * sigma;
    for (ch, kp) in keypoints.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        for y in 0..heatmap_h {
            for x in 0..heatmap_w {
                let d2 = (x as f64 - kp.x).powi(2) + (y as f64 - kp.y).powi(2);
                out.set(0, ch, y, x, (-d2 / denom).exp() as f32);
            }
        }
    }
    out
}

/// Mean over all elements of the squared difference.
pub fn mse_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            axis: "numel",
            expected: pred.numel(),
            actual: target.numel(),
        });
    }
    let sum: S = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum * S::from_f64(1.0 / pred.numel().max(1) as f64))
}

/// Traced MSE between two tape values.
pub fn mse_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    pred: ValueId,
    target: ValueId,
) -> Result<ValueId> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

// ── Training loop ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!("epoch={} lr={} loss={}", self.epoch, self.lr, self.mean_loss)
    }
}

/// One plain SGD sweep: `p <- p - lr * grad`, lr from [`sgdr_lr`] at the
/// fractional epoch of each batch. Deterministic under a fixed seed.
/// The callback receives each epoch's log line and the attention
/// reports observed on the epoch's first batch.
pub fn train_loop(
    model: &mut Model<f32>,
    dataset: &[SyntheticSample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog, &[AttentionReport]),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::precondition("train_loop", "dataset is empty"));
    }
    let k_model = model.config.num_keypoints;
    for s in dataset {
        if s.keypoints.len() != k_model {
            return Err(Error::ShapeMismatch {
                op: "train_loop",
                axis: "keypoints",
                expected: k_model,
                actual: s.keypoints.len(),
            });
        }
    }
    let (hm_h, hm_w) = model.config.heatmap_dims();
    let aug_cfg = cfg.augment_config();
    let aug_enabled = aug_cfg.flip
        || aug_cfg.cutout
        || aug_cfg.scale_jitter != 0.0
        || aug_cfg.rotation_max != 0.0;
    let mut rng = Rng::new(seed);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rng.shuffle(&mut order);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let num_batches = batches.len();
        let mut loss_sum = 0.0;
        let mut first_reports: Vec<AttentionReport> = Vec::new();
        let epoch_lr = sgdr_lr(epoch as f64, cfg);

        for (bi, batch) in batches.iter().enumerate() {
            let mut images = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &si in batch.iter() {
                let sample = if aug_enabled {
                    augment(&dataset[si], &aug_cfg, &mut rng)
                } else {
                    dataset[si].clone()
                };
                let hm_kps: Vec<KeypointGt> = sample
                    .keypoints
                    .iter()
                    .map(|kp| KeypointGt {
                        x: kp.x / 4.0,
                        y: kp.y / 4.0,
                        visible: kp.visible,
                    })
                    .collect();
                targets.push(render_target(&hm_kps, hm_h, hm_w, cfg.sigma));
                images.push(sample.image);
            }
            let images = Tensor::stack_batch(&images)?;
            let targets = Tensor::stack_batch(&targets)?;

            let mut traced = model.forward_traced(&images)?;
            let target_id = traced.tape.constant(&targets);
            let loss_id = mse_on_tape(&mut traced.tape, traced.heatmap, target_id)?;
            let loss = traced.tape.value(loss_id).item() as f64;
            traced.tape.backward(loss_id)?;

            if !loss.is_finite() {
                let bad = traced
                    .params
                    .iter()
                    .find(|(_, id)| {
                        traced
                            .tape
                            .grad(*id)
                            .map(|g| !g.all_finite())
                            .unwrap_or(false)
                    })
                    .map(|(n, _)| n.clone())
                    .unwrap_or_else(|| "(all gradients finite)".to_string());
                return Err(Error::NonFiniteLoss { epoch, param: bad });
            }

            let lr = sgdr_lr(epoch as f64 + bi as f64 / num_batches as f64, cfg) as f32;
            let grads: HashMap<&str, &Tensor<f32>> = traced
                .params
                .iter()
                .filter_map(|(n, id)| traced.tape.grad(*id).map(|g| (n.as_str(), g)))
                .collect();
            model.visit_params_mut(&mut |name, t| {
                if let Some(g) = grads.get(name) {
                    for (p, gv) in t.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                    }
                }
            });

            loss_sum += loss;
            if bi == 0 {
                first_reports = traced.reports;
            }
        }

        let log = EpochLog {
            epoch,
            lr: epoch_lr,
            mean_loss: loss_sum / num_batches as f64,
        };
        on_epoch(&log, &first_reports);
        logs.push(log);
    }
    Ok(logs)
}
