//! Resolution-wise attention fusion.
//!
//! Each output level learns one scalar importance weight per input
//! level: every input is rescaled by a sampling branch, squeezed to a
//! scalar by global pooling and a 1x1 aggregation conv, passed through
//! a softmax over input levels, and affinely rescaled as
//! `w = softmax(E) * omega + beta`, so weights are not confined to
//! (0, 1). The output is the weight-scaled sum of the rescaled inputs.

use crate::error::{Error, Result};
use crate::params::{Binder, BoundConv2d, Conv2dParams, Visit, VisitMut};
use crate::pyramid::{level_channels, validate_pyramid};
use crate::rng::Rng;
use crate::scalar::{softmax_vec, Scalar};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

// ── Sampling branches ───────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    /// True pass-through; only legal when from_level == to_level.
    Identity,
    /// `d` strided 3x3 convs, each halving spatial dims and doubling channels.
    Down(usize),
    /// One bilinear resize to the target dims plus a channel-matching 1x1 conv.
    Up(usize),
}

/// Rescales a level-`from` feature map to level-`to` shape.
/// The convolutions are bias-free, so the branch is linear.
#[derive(Clone, Debug)]
pub struct Sampler<S: Scalar> {
    pub from_level: usize,
    pub to_level: usize,
    pub kind: SamplerKind,
    pub down_convs: Vec<Conv2dParams<S>>,
    pub up_proj: Option<Conv2dParams<S>>,
}

impl<S: Scalar> Sampler<S> {
    pub fn new(width: usize, from_level: usize, to_level: usize, rng: &mut Rng) -> Self {
        use std::cmp::Ordering::*;
        match from_level.cmp(&to_level) {
            Equal => Sampler {
                from_level,
                to_level,
                kind: SamplerKind::Identity,
                down_convs: Vec::new(),
                up_proj: None,
            },
            Less => {
                let down_convs = (from_level..to_level)
                    .map(|l| {
                        Conv2dParams::init(
                            level_channels(width, l),
                            level_channels(width, l + 1),
                            3,
                            2,
                            1,
                            false,
                            rng,
                        )
                    })
                    .collect();
                Sampler {
                    from_level,
                    to_level,
                    kind: SamplerKind::Down(to_level - from_level),
                    down_convs,
                    up_proj: None,
                }
            }
            Greater => Sampler {
                from_level,
                to_level,
                kind: SamplerKind::Up(from_level - to_level),
                down_convs: Vec::new(),
                up_proj: Some(Conv2dParams::init(
                    level_channels(width, from_level),
                    level_channels(width, to_level),
                    1,
                    1,
                    0,
                    false,
                    rng,
                )),
            },
        }
    }

    pub fn visit(&self, prefix: &str, f: Visit<S>) {
        for (i, c) in self.down_convs.iter().enumerate() {
            c.visit(&format!("{prefix}.down{i}"), f);
        }
        if let Some(p) = &self.up_proj {
            p.visit(&format!("{prefix}.proj"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMut<S>) {
        for (i, c) in self.down_convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.down{i}"), f);
        }
        if let Some(p) = &mut self.up_proj {
            p.visit_mut(&format!("{prefix}.proj"), f);
        }
    }

    pub fn bind(&self, b: &mut Binder<S>, prefix: &str) -> BoundSampler {
        BoundSampler {
            kind: self.kind.clone(),
            down: self
                .down_convs
                .iter()
                .enumerate()
                .map(|(i, c)| c.bind(b, &format!("{prefix}.down{i}")))
                .collect(),
            up: self.up_proj.as_ref().map(|p| p.bind(b, &format!("{prefix}.proj"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundSampler {
    kind: SamplerKind,
    down: Vec<BoundConv2d>,
    up: Option<BoundConv2d>,
}

impl BoundSampler {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: ValueId) -> Result<ValueId> {
        match &self.kind {
            SamplerKind::Identity => Ok(x),
            SamplerKind::Down(_) => {
                let mut cur = x;
                for conv in &self.down {
                    cur = conv.apply(tape, cur)?;
                }
                Ok(cur)
            }
            SamplerKind::Up(d) => {
                let s = tape.shape(x);
                let resized = tape.bilinear_resize(x, s.h << d, s.w << d)?;
                self.up.as_ref().expect("up sampler has proj").apply(tape, resized)
            }
        }
    }
}

// ── Attention parameters ────────────────────────────────────────────

/// Per-edge attention parameters: the 1x1 aggregation conv (rescaled-map
/// channels -> 1, with bias) and the affine scalar pair.
#[derive(Clone, Debug)]
pub struct EdgeAttention<S: Scalar> {
    pub agg: Conv2dParams<S>,
    pub omega: Tensor<S>,
    pub beta: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct RamEdge<S: Scalar> {
    pub sampler: Sampler<S>,
    pub attention: Option<EdgeAttention<S>>,
}

/// Parameters of one fusion module: `edges[i][h]` connects input level
/// `h+1` to output level `out_levels[i]`.
#[derive(Clone, Debug)]
pub struct RamParams<S: Scalar> {
    pub width: usize,
    pub in_levels: usize,
    pub out_levels: Vec<usize>,
    pub edges: Vec<Vec<RamEdge<S>>>,
}

impl<S: Scalar> RamParams<S> {
    /// `attention = false` builds plain uniform-sum fusion (no omega,
    /// beta, or aggregation convs at all).
    pub fn new(
        width: usize,
        in_levels: usize,
        out_levels: Vec<usize>,
        attention: bool,
        rng: &mut Rng,
    ) -> Self {
        let edges = out_levels
            .iter()
            .map(|&i| {
                (1..=in_levels)
                    .map(|h| RamEdge {
                        sampler: Sampler::new(width, h, i, rng),
                        attention: attention.then(|| EdgeAttention {
                            // aggregates the rescaled map, which carries
                            // output-level channels
                            agg: Conv2dParams::init(
                                level_channels(width, i),
                                1,
                                1,
                                1,
                                0,
                                true,
                                rng,
                            ),
                            omega: Tensor::scalar(S::ONE),
                            beta: Tensor::scalar(S::ZERO),
                        }),
                    })
                    .collect()
            })
            .collect();
        RamParams {
            width,
            in_levels,
            out_levels,
            edges,
        }
    }

    pub fn visit(&self, prefix: &str, f: Visit<S>) {
        for (ei, row) in self.edges.iter().enumerate() {
            let i = self.out_levels[ei];
            for (hi, edge) in row.iter().enumerate() {
                let h = hi + 1;
                let p = format!("{prefix}.edge_{i}_{h}");
                edge.sampler.visit(&p, f);
                if let Some(a) = &edge.attention {
                    a.agg.visit(&format!("{p}.agg"), f);
                    f(&format!("{p}.omega"), &a.omega);
                    f(&format!("{p}.beta"), &a.beta);
                }
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMut<S>) {
        for (ei, row) in self.edges.iter_mut().enumerate() {
            let i = self.out_levels[ei];
            for (hi, edge) in row.iter_mut().enumerate() {
                let h = hi + 1;
                let p = format!("{prefix}.edge_{i}_{h}");
                edge.sampler.visit_mut(&p, f);
                if let Some(a) = &mut edge.attention {
                    a.agg.visit_mut(&format!("{p}.agg"), f);
                    f(&format!("{p}.omega"), &mut a.omega);
                    f(&format!("{p}.beta"), &mut a.beta);
                }
            }
        }
    }

    pub fn bind(&self, b: &mut Binder<S>, prefix: &str) -> BoundRam {
        BoundRam {
            out_levels: self.out_levels.clone(),
            edges: self
                .edges
                .iter()
                .enumerate()
                .map(|(ei, row)| {
                    let i = self.out_levels[ei];
                    row.iter()
                        .enumerate()
                        .map(|(hi, edge)| {
                            let h = hi + 1;
                            let p = format!("{prefix}.edge_{i}_{h}");
                            BoundRamEdge {
                                sampler: edge.sampler.bind(b, &p),
                                attention: edge.attention.as_ref().map(|a| BoundEdgeAttention {
                                    agg: a.agg.bind(b, &format!("{p}.agg")),
                                    omega: b.param(format!("{p}.omega"), &a.omega),
                                    beta: b.param(format!("{p}.beta"), &a.beta),
                                }),
                            }
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundEdgeAttention {
    pub agg: BoundConv2d,
    pub omega: ValueId,
    pub beta: ValueId,
}

#[derive(Clone, Debug)]
pub struct BoundRamEdge {
    pub sampler: BoundSampler,
    pub attention: Option<BoundEdgeAttention>,
}

#[derive(Clone, Debug)]
pub struct BoundRam {
    pub out_levels: Vec<usize>,
    pub edges: Vec<Vec<BoundRamEdge>>,
}

// ── Attention report ────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    pub out_level: usize,
    pub in_level: usize,
    /// Pooled-and-aggregated raw scalar (batch mean).
    pub raw: f64,
    pub softmax: f64,
    pub weight: f64,
}

/// Observed attention values of one fusion module application.
/// Uniform fusion reports nominal values (raw 0, softmax 1/M, weight 1).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionReport {
    pub stage: usize,
    pub rows: Vec<AttentionRow>,
}

impl AttentionReport {
    /// One `stage level_i level_h E softmax W` line per edge.
    pub fn dump_lines(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{} {} {} {} {} {}",
                    self.stage, r.out_level, r.in_level, r.raw, r.softmax, r.weight
                )
            })
            .collect()
    }
}

impl BoundRam {
    /// Traced fusion. `uniform` forces every weight to 1 (plain sum).
    pub fn fuse<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        inputs: &[ValueId],
        uniform: bool,
    ) -> Result<(Vec<ValueId>, AttentionReport)> {
        let m = inputs.len();
        let mut report = AttentionReport::default();
        let mut outputs = Vec::with_capacity(self.edges.len());
        for (ei, row) in self.edges.iter().enumerate() {
            let out_level = self.out_levels[ei];
            if row.len() != m {
                return Err(Error::ShapeMismatch {
                    op: "ram_fuse",
                    axis: "input levels",
                    expected: row.len(),
                    actual: m,
                });
            }
            let sampled: Vec<ValueId> = row
                .iter()
                .zip(inputs)
                .map(|(edge, &x)| edge.sampler.apply(tape, x))
                .collect::<Result<_>>()?;

            let attend = !uniform && row.iter().all(|e| e.attention.is_some());
            if attend {
                // Eq-style path: pooled scalars -> softmax -> affine -> weighted sum
                let mut raw_ids = Vec::with_capacity(m);
                for (edge, &s) in row.iter().zip(&sampled) {
                    let att = edge.attention.as_ref().expect("checked attend");
                    let pooled = tape.global_avg_pool(s)?;
                    let e = att.agg.apply(tape, pooled)?;
                    raw_ids.push(tape.batch_mean(e));
                }
                let mut stacked = raw_ids[0];
                for &e in &raw_ids[1..] {
                    stacked = tape.concat_channels(stacked, e)?;
                }
                let soft = tape.softmax_channels(stacked);
                let mut acc: Option<ValueId> = None;
                for (hi, (edge, &s)) in row.iter().zip(&sampled).enumerate() {
                    let att = edge.attention.as_ref().expect("checked attend");
                    let s_h = tape.channel_slice(soft, hi)?;
                    let scaled = tape.mul(s_h, att.omega)?;
                    let w_h = tape.add(scaled, att.beta)?;
                    report.rows.push(AttentionRow {
                        out_level,
                        in_level: hi + 1,
                        raw: tape.value(raw_ids[hi]).item().to_f64(),
                        softmax: tape.value(soft).data()[hi].to_f64(),
                        weight: tape.value(w_h).item().to_f64(),
                    });
                    let contrib = tape.mul_scalar(s, w_h)?;
                    acc = Some(match acc {
                        None => contrib,
                        Some(a) => tape.add(a, contrib)?,
                    });
                }
                outputs.push(acc.expect("at least one input level"));
            } else {
                let mut acc: Option<ValueId> = None;
                for (hi, &s) in sampled.iter().enumerate() {
                    report.rows.push(AttentionRow {
                        out_level,
                        in_level: hi + 1,
                        raw: 0.0,
                        softmax: 1.0 / m as f64,
                        weight: 1.0,
                    });
                    acc = Some(match acc {
                        None => s,
                        Some(a) => tape.add(a, s)?,
                    });
                }
                outputs.push(acc.expect("at least one input level"));
            }
        }
        Ok((outputs, report))
    }

    /// Fusion with externally fixed weights, bypassing the pooled-scalar
    /// path entirely (used by linearity checks).
    pub fn fuse_fixed<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        inputs: &[ValueId],
        weights: &[Vec<f64>],
    ) -> Result<Vec<ValueId>> {
        let mut outputs = Vec::with_capacity(self.edges.len());
        for (ei, row) in self.edges.iter().enumerate() {
            let mut acc: Option<ValueId> = None;
            for (hi, (edge, &x)) in row.iter().zip(inputs).enumerate() {
                let s = edge.sampler.apply(tape, x)?;
                let contrib = tape.scale(s, S::from_f64(weights[ei][hi]));
                acc = Some(match acc {
                    None => contrib,
                    Some(a) => tape.add(a, contrib)?,
                });
            }
            outputs.push(acc.expect("at least one input level"));
        }
        Ok(outputs)
    }
}

// ── Untraced convenience API ────────────────────────────────────────

/// Raw pooled scalars `E_h` for one output level, averaged over the batch.
pub fn ram_scalars<S: Scalar>(
    inputs: &[Tensor<S>],
    params: &RamParams<S>,
    out_level: usize,
) -> Result<Vec<S>> {
    validate_pyramid(params.width, inputs)?;
    let ei = params
        .out_levels
        .iter()
        .position(|&l| l == out_level)
        .ok_or_else(|| {
            Error::precondition("ram_scalars", format!("no output level {out_level}"))
        })?;
    let mut tape: Tape<S> = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.constant(t)).collect();
    let mut binder = Binder::new(&mut tape);
    let bound = params.bind(&mut binder, "ram");
    drop(binder);
    let row = &bound.edges[ei];
    let mut out = Vec::with_capacity(inputs.len());
    for (edge, &x) in row.iter().zip(&ids) {
        let att = edge.attention.as_ref().ok_or_else(|| {
            Error::precondition("ram_scalars", "attention parameters are disabled")
        })?;
        let s = edge.sampler.apply(&mut tape, x)?;
        let pooled = tape.global_avg_pool(s)?;
        let e = att.agg.apply(&mut tape, pooled)?;
        let m = tape.batch_mean(e);
        out.push(tape.value(m).item());
    }
    Ok(out)
}

/// `W_h = softmax(E)_h * omega_h + beta_h`.
pub fn ram_weights<S: Scalar>(e: &[S], omegas: &[S], betas: &[S]) -> Result<Vec<S>> {
    if e.len() != omegas.len() || e.len() != betas.len() {
        return Err(Error::ShapeMismatch {
            op: "ram_weights",
            axis: "vector length",
            expected: e.len(),
            actual: omegas.len().min(betas.len()),
        });
    }
    let soft = softmax_vec(e)?;
    Ok(soft
        .iter()
        .zip(omegas.iter().zip(betas))
        .map(|(&s, (&o, &b))| s * o + b)
        .collect())
}

/// Attention-weighted fusion of a pyramid; returns one output per
/// configured output level plus the observed attention values.
pub fn ram_fuse<S: Scalar>(
    inputs: &[Tensor<S>],
    params: &RamParams<S>,
) -> Result<(Vec<Tensor<S>>, AttentionReport)> {
    run_fuse(inputs, params, false)
}

/// Plain-sum ablation: identical wiring with every weight forced to 1.
pub fn ram_fuse_uniform<S: Scalar>(
    inputs: &[Tensor<S>],
    params: &RamParams<S>,
) -> Result<Vec<Tensor<S>>> {
    Ok(run_fuse(inputs, params, true)?.0)
}

fn run_fuse<S: Scalar>(
    inputs: &[Tensor<S>],
    params: &RamParams<S>,
    uniform: bool,
) -> Result<(Vec<Tensor<S>>, AttentionReport)> {
    validate_pyramid(params.width, inputs)?;
    if inputs.len() != params.in_levels {
        return Err(Error::ShapeMismatch {
            op: "ram_fuse",
            axis: "input levels",
            expected: params.in_levels,
            actual: inputs.len(),
        });
    }
    let mut tape: Tape<S> = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.constant(t)).collect();
    let mut binder = Binder::new(&mut tape);
    let bound = params.bind(&mut binder, "ram");
    drop(binder);
    let (out_ids, report) = bound.fuse(&mut tape, &ids, uniform)?;
    let outputs = out_ids.iter().map(|&id| tape.value(id).clone()).collect();
    Ok((outputs, report))
}
