//! Full network assembly.
//!
//! A two-conv stem drops the input to quarter resolution, stages grow
//! the pyramid one level at a time (each stage runs residual blocks on
//! every live level, then a fusion module whose extra downsampling
//! branch creates the next level), and a regression head folds the
//! final pyramid into the keypoint heatmap.

use crate::error::{Error, Result};
use crate::gpr::{BoundHead, HeadKind, HeadParams};
use crate::params::{Binder, BoundConv2d, Conv2dParams, Visit, VisitMut};
use crate::pyramid::level_channels;
use crate::ram::{AttentionReport, BoundRam, RamParams};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Shape, Tensor};

// ── Configuration ───────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Channels at the highest-resolution level (e.g. 32 for W32).
    pub width: usize,
    pub num_stages: usize,
    pub blocks_per_stage: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub num_keypoints: usize,
    pub attention_enabled: bool,
    pub head: HeadKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            width: 32,
            num_stages: 4,
            blocks_per_stage: 2,
            input_h: 256,
            input_w: 192,
            num_keypoints: 17,
            attention_enabled: true,
            head: HeadKind::Gpr,
        }
    }
}

impl NetworkConfig {
    /// Collects every violated invariant instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.width < 1 {
            violations.push("width must be >= 1".to_string());
        }
        if self.num_stages < 1 {
            violations.push("num_stages must be >= 1".to_string());
        }
        if self.blocks_per_stage < 1 {
            violations.push("blocks_per_stage must be >= 1".to_string());
        }
        if self.num_keypoints < 1 {
            violations.push("num_keypoints must be >= 1".to_string());
        }
        if 3 * self.input_h != 4 * self.input_w {
            violations.push(format!(
                "input {}x{} is not 4:3",
                self.input_h, self.input_w
            ));
        }
        if self.num_stages >= 1 {
            let div = 4usize << (self.num_stages - 1);
            if !self.input_h.is_multiple_of(div) {
                violations.push(format!(
                    "input height {} not divisible by {div} (4 * 2^(stages-1))",
                    self.input_h
                ));
            }
            if !self.input_w.is_multiple_of(div) {
                violations.push(format!(
                    "input width {} not divisible by {div} (4 * 2^(stages-1))",
                    self.input_w
                ));
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { violations })
        }
    }

    /// Heatmap spatial dims: input / 4.
    pub fn heatmap_dims(&self) -> (usize, usize) {
        (self.input_h / 4, self.input_w / 4)
    }
}

// ── Residual block ──────────────────────────────────────────────────

/// Two 3x3 convs with biases and an identity skip; output shape equals
/// input shape.
#[derive(Clone, Debug)]
pub struct ResidualBlock<S: Scalar> {
    pub conv1: Conv2dParams<S>,
    pub conv2: Conv2dParams<S>,
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn init(channels: usize, rng: &mut Rng) -> Self {
        ResidualBlock {
            conv1: Conv2dParams::init(channels, channels, 3, 1, 1, true, rng),
            conv2: Conv2dParams::init(channels, channels, 3, 1, 1, true, rng),
        }
    }

    pub fn visit(&self, prefix: &str, f: Visit<S>) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMut<S>) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
    }

    pub fn bind(&self, b: &mut Binder<S>, prefix: &str) -> BoundResidualBlock {
        BoundResidualBlock {
            conv1: self.conv1.bind(b, &format!("{prefix}.conv1")),
            conv2: self.conv2.bind(b, &format!("{prefix}.conv2")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundResidualBlock {
    conv1: BoundConv2d,
    conv2: BoundConv2d,
}

impl BoundResidualBlock {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: ValueId) -> Result<ValueId> {
        let y = self.conv1.apply(tape, x)?;
        let y = tape.relu(y);
        let y = self.conv2.apply(tape, y)?;
        let y = tape.add(y, x)?;
        Ok(tape.relu(y))
    }
}

// ── Stages and model ────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Stage<S: Scalar> {
    /// blocks[level-1][block]
    pub blocks: Vec<Vec<ResidualBlock<S>>>,
    pub ram: RamParams<S>,
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub config: NetworkConfig,
    pub stem_conv1: Conv2dParams<S>,
    pub stem_conv2: Conv2dParams<S>,
    pub stages: Vec<Stage<S>>,
    pub head: HeadParams<S>,
}

/// Deterministic construction from a seed.
pub fn build<S: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Model<S>> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let width = config.width;
    let stem_conv1 = Conv2dParams::init(3, width, 3, 2, 1, true, &mut rng);
    let stem_conv2 = Conv2dParams::init(width, width, 3, 2, 1, true, &mut rng);
    let stages = (1..=config.num_stages)
        .map(|s| {
            let blocks = (1..=s)
                .map(|level| {
                    (0..config.blocks_per_stage)
                        .map(|_| ResidualBlock::init(level_channels(width, level), &mut rng))
                        .collect()
                })
                .collect();
            // intermediate stages emit one extra (lower) level; the
            // final stage fans back into its own levels for the head
            let out_hi = if s < config.num_stages { s + 1 } else { s };
            let ram = RamParams::new(
                width,
                s,
                (1..=out_hi).collect(),
                config.attention_enabled,
                &mut rng,
            );
            Stage { blocks, ram }
        })
        .collect();
    let head = HeadParams::new(
        config.head,
        width,
        config.num_stages,
        config.num_keypoints,
        &mut rng,
    );
    Ok(Model {
        config: config.clone(),
        stem_conv1,
        stem_conv2,
        stages,
        head,
    })
}

pub struct BoundModel {
    pub stem_conv1: BoundConv2d,
    pub stem_conv2: BoundConv2d,
    pub stages: Vec<(Vec<Vec<BoundResidualBlock>>, BoundRam)>,
    pub head: BoundHead,
}

/// A forward pass kept on its tape, so callers can extend the graph
/// (losses) and run backward. `params` lists every trainable leaf in
/// canonical visit order.
pub struct TracedForward<S: Scalar> {
    pub tape: Tape<S>,
    pub heatmap: ValueId,
    pub reports: Vec<AttentionReport>,
    pub params: Vec<(String, ValueId)>,
}

impl<S: Scalar> Model<S> {
    pub fn visit_params(&self, f: Visit<S>) {
        self.stem_conv1.visit("stem.conv1", f);
        self.stem_conv2.visit("stem.conv2", f);
        for (si, stage) in self.stages.iter().enumerate() {
            let s = si + 1;
            for (li, level) in stage.blocks.iter().enumerate() {
                for (bi, block) in level.iter().enumerate() {
                    block.visit(&format!("stage{s}.level{}.block{bi}", li + 1), f);
                }
            }
            stage.ram.visit(&format!("stage{s}.ram"), f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_params_mut(&mut self, f: VisitMut<S>) {
        self.stem_conv1.visit_mut("stem.conv1", f);
        self.stem_conv2.visit_mut("stem.conv2", f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            let s = si + 1;
            for (li, level) in stage.blocks.iter_mut().enumerate() {
                for (bi, block) in level.iter_mut().enumerate() {
                    block.visit_mut(&format!("stage{s}.level{}.block{bi}", li + 1), f);
                }
            }
            stage.ram.visit_mut(&format!("stage{s}.ram"), f);
        }
        self.head.visit_mut("head", f);
    }

    pub fn bind(&self, b: &mut Binder<S>) -> BoundModel {
        BoundModel {
            stem_conv1: self.stem_conv1.bind(b, "stem.conv1"),
            stem_conv2: self.stem_conv2.bind(b, "stem.conv2"),
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(si, stage)| {
                    let s = si + 1;
                    let blocks = stage
                        .blocks
                        .iter()
                        .enumerate()
                        .map(|(li, level)| {
                            level
                                .iter()
                                .enumerate()
                                .map(|(bi, block)| {
                                    block.bind(b, &format!("stage{s}.level{}.block{bi}", li + 1))
                                })
                                .collect()
                        })
                        .collect();
                    let ram = stage.ram.bind(b, &format!("stage{s}.ram"));
                    (blocks, ram)
                })
                .collect(),
            head: self.head.bind(b, "head"),
        }
    }

    pub fn count_params(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_, t| count += t.numel());
        count
    }

    /// Forward returning plain tensors.
    pub fn forward(&self, images: &Tensor<S>) -> Result<(Tensor<S>, Vec<AttentionReport>)> {
        let traced = self.forward_traced(images)?;
        Ok((
            traced.tape.value(traced.heatmap).clone(),
            traced.reports,
        ))
    }

    /// Forward that keeps the tape alive for training and FLOP counting.
    pub fn forward_traced(&self, images: &Tensor<S>) -> Result<TracedForward<S>> {
        let s = images.shape();
        for (axis, expected, actual) in [
            ("channels", 3, s.c),
            ("height", self.config.input_h, s.h),
            ("width", self.config.input_w, s.w),
        ] {
            if expected != actual {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    axis,
                    expected,
                    actual,
                });
            }
        }
        let mut tape: Tape<S> = Tape::new();
        let input = tape.constant(images);
        let mut binder = Binder::new(&mut tape);
        let bound = self.bind(&mut binder);
        let params = binder.finish();

        let x = bound.stem_conv1.apply(&mut tape, input)?;
        let x = tape.relu(x);
        let x = bound.stem_conv2.apply(&mut tape, x)?;
        let x = tape.relu(x);

        let mut pyramid = vec![x];
        let mut reports = Vec::with_capacity(self.stages.len());
        let uniform = !self.config.attention_enabled;
        for (si, (blocks, ram)) in bound.stages.iter().enumerate() {
            for (level, level_blocks) in blocks.iter().enumerate() {
                for block in level_blocks {
                    pyramid[level] = block.apply(&mut tape, pyramid[level])?;
                }
            }
            let (next, mut report) = ram.fuse(&mut tape, &pyramid, uniform)?;
            report.stage = si + 1;
            reports.push(report);
            pyramid = next;
        }
        let heatmap = bound.head.apply(&mut tape, &pyramid)?;
        Ok(TracedForward {
            tape,
            heatmap,
            reports,
            params,
        })
    }
}

/// Conv/deconv FLOPs of one forward pass at the given input size
/// (batch 1).
pub fn count_flops<S: Scalar>(model: &Model<S>) -> Result<u64> {
    let zeros = Tensor::zeros(Shape::new(
        1,
        3,
        model.config.input_h,
        model.config.input_w,
    ));
    Ok(model.forward_traced(&zeros)?.tape.flops())
}
