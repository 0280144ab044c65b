//! Finite-difference gradient verification.
//!
//! The oracle side touches only forward evaluations (central
//! differences, step 1e-5, f64), so it stays independent of the
//! backward implementations it judges. Relative error is normalized by
//! `max(|analytic|, |numeric|, 1)`.

use crate::error::Result;
use crate::gpr::{GprParams, RescaleSumParams};
use crate::posenet::{build, Model, NetworkConfig};
use crate::pyramid::level_channels;
use crate::ram::RamParams;
use crate::rng::Rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Shape, Tensor};
use crate::train::{mse_loss, mse_on_tape};

pub const FD_STEP: f64 = 1e-5;
pub const OPS_TOL: f64 = 1e-4;
pub const FULL_TOL: f64 = 1e-3;
pub const DEFAULT_SEEDS: [u64; 5] = [101, 202, 303, 404, 505];
/// Central differences are only meaningful when no ReLU input falls
/// inside the +-step window; these seeds keep the end-to-end network's
/// activations clear of kinks.
pub const FULL_SEEDS: [u64; 5] = [101, 303, 404, 505, 707];

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub group: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// One differentiable graph: named parameter tensors plus a builder
/// that produces a scalar loss from their tape ids.
pub struct Case {
    pub name: String,
    pub params: Vec<Tensor<f64>>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>>,
}

/// Max relative error between tape gradients and central differences
/// over every element of every parameter.
pub fn check_case(case: &Case) -> f64 {
    let mut tape: Tape<f64> = Tape::new();
    let ids: Vec<ValueId> = case.params.iter().map(|t| tape.param(t)).collect();
    let loss = (case.build)(&mut tape, &ids).expect("case build");
    tape.backward(loss).expect("case backward");
    let grads: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(id)))
        })
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let ids: Vec<ValueId> = ps.iter().map(|t| tape.constant(t)).collect();
        let loss = (case.build)(&mut tape, &ids).expect("case build");
        tape.value(loss).item()
    };

    let mut work = case.params.clone();
    let mut max_err = 0.0f64;
    for pi in 0..work.len() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + FD_STEP;
            let plus = eval(&work);
            work[pi].data_mut()[ei] = orig - FD_STEP;
            let minus = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(grads[pi].data()[ei], numeric));
        }
    }
    max_err
}

fn rand_t(rng: &mut Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::random_uniform(Shape::new(n, c, h, w), -1.0, 1.0, rng)
}

/// Random tensor bounded away from zero (keeps ReLU kinks out of the
/// finite-difference window).
fn rand_off_zero(rng: &mut Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let t = rand_t(rng, n, c, h, w);
    t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Weighted-sum loss: `sum(x * g)` with a fixed random probe `g`
/// (a plain sum has zero gradient through softmax).
fn probe_loss(
    tape: &mut Tape<f64>,
    x: ValueId,
    probe: &Tensor<f64>,
) -> Result<ValueId> {
    let g = tape.constant(probe);
    let weighted = tape.mul(x, g)?;
    Ok(tape.sum_all(weighted))
}

fn probe_for(rng: &mut Rng, shape: Shape) -> Tensor<f64> {
    Tensor::random_uniform(shape, -1.0, 1.0, rng)
}

/// Per-operator cases for one seed.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    let mut rng = Rng::new(seed);

    // conv2d variants: x, w, b all differentiable
    for (k, stride, pad) in [(1usize, 1usize, 0usize), (3, 1, 1), (3, 2, 1)] {
        let x = rand_t(&mut rng, 2, 3, 6, 5);
        let w = rand_t(&mut rng, 4, 3, k, k);
        let b = rand_t(&mut rng, 1, 4, 1, 1);
        let out_h = (6 + 2 * pad - k) / stride + 1;
        let out_w = (5 + 2 * pad - k) / stride + 1;
        let probe = probe_for(&mut rng, Shape::new(2, 4, out_h, out_w));
        cases.push(Case {
            name: format!("conv2d k{k} s{stride} p{pad}"),
            params: vec![x, w, b],
            build: Box::new(move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad)?;
                probe_loss(tape, y, &probe)
            }),
        });
    }

    // deconv2d variants
    for (k, stride, pad) in [(4usize, 2usize, 1usize), (3, 1, 0)] {
        let x = rand_t(&mut rng, 2, 3, 4, 3);
        let w = rand_t(&mut rng, 3, 2, k, k);
        let b = rand_t(&mut rng, 1, 2, 1, 1);
        let out_h = (4 - 1) * stride + k - 2 * pad;
        let out_w = (3 - 1) * stride + k - 2 * pad;
        let probe = probe_for(&mut rng, Shape::new(2, 2, out_h, out_w));
        cases.push(Case {
            name: format!("deconv2d k{k} s{stride} p{pad}"),
            params: vec![x, w, b],
            build: Box::new(move |tape, ids| {
                let y = tape.deconv2d(ids[0], ids[1], Some(ids[2]), stride, pad)?;
                probe_loss(tape, y, &probe)
            }),
        });
    }

    // bilinear resize up and down
    for (oh, ow, tag) in [(9usize, 7usize, "up"), (3, 2, "down")] {
        let x = rand_t(&mut rng, 2, 2, 5, 4);
        let probe = probe_for(&mut rng, Shape::new(2, 2, oh, ow));
        cases.push(Case {
            name: format!("bilinear_resize {tag}"),
            params: vec![x],
            build: Box::new(move |tape, ids| {
                let y = tape.bilinear_resize(ids[0], oh, ow)?;
                probe_loss(tape, y, &probe)
            }),
        });
    }

    {
        let x = rand_t(&mut rng, 2, 3, 4, 5);
        let probe = probe_for(&mut rng, Shape::new(2, 3, 1, 1));
        cases.push(Case {
            name: "global_avg_pool".to_string(),
            params: vec![x],
            build: Box::new(move |tape, ids| {
                let y = tape.global_avg_pool(ids[0])?;
                probe_loss(tape, y, &probe)
            }),
        });
    }
    {
        let x = rand_t(&mut rng, 3, 2, 3, 3);
        let probe = probe_for(&mut rng, Shape::new(1, 2, 3, 3));
        cases.push(Case {
            name: "batch_mean".to_string(),
            params: vec![x],
            build: Box::new(move |tape, ids| {
                let y = tape.batch_mean(ids[0]);
                probe_loss(tape, y, &probe)
            }),
        });
    }
    {
        let x = rand_t(&mut rng, 2, 4, 2, 2);
        let probe = probe_for(&mut rng, Shape::new(2, 4, 2, 2));
        cases.push(Case {
            name: "softmax_channels".to_string(),
            params: vec![x],
            build: Box::new(move |tape, ids| {
                let y = tape.softmax_channels(ids[0]);
                probe_loss(tape, y, &probe)
            }),
        });
    }
    for (name, op) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
    ] {
        let a = rand_t(&mut rng, 2, 2, 3, 3);
        let b = rand_t(&mut rng, 2, 2, 3, 3);
        let probe = probe_for(&mut rng, Shape::new(2, 2, 3, 3));
        cases.push(Case {
            name: name.to_string(),
            params: vec![a, b],
            build: Box::new(move |tape, ids| {
                let y = match op {
                    0 => tape.add(ids[0], ids[1])?,
                    1 => tape.sub(ids[0], ids[1])?,
                    _ => tape.mul(ids[0], ids[1])?,
                };
                probe_loss(tape, y, &probe)
            }),
        });
    }
    {
        let a = rand_t(&mut rng, 2, 2, 3, 3);
        let b = rand_t(&mut rng, 2, 3, 3, 3);
        let probe = probe_for(&mut rng, Shape::new(2, 5, 3, 3));
        cases.push(Case {
            name: "concat_channels".to_string(),
            params: vec![a, b],
            build: Box::new(move |tape, ids| {
                let y = tape.concat_channels(ids[0], ids[1])?;
                probe_loss(tape, y, &probe)
            }),
        });
    }
    {
        let x = rand_t(&mut rng, 2, 4, 3, 3);
        let probe = probe_for(&mut rng, Shape::new(2, 1, 3, 3));
        cases.push(Case {
            name: "channel_slice".to_string(),
            params: vec![x],
            build: Box::new(move |tape, ids| {
                let y = tape.channel_slice(ids[0], 2)?;
                probe_loss(tape, y, &probe)
            }),
        });
    }
    {
        let x = rand_off_zero(&mut rng, 2, 3, 4, 4);
        let probe = probe_for(&mut rng, Shape::new(2, 3, 4, 4));
        cases.push(Case {
            name: "relu".to_string(),
            params: vec![x],
            build: Box::new(move |tape, ids| {
                let y = tape.relu(ids[0]);
                probe_loss(tape, y, &probe)
            }),
        });
    }
    {
        let x = rand_t(&mut rng, 2, 2, 3, 3);
        let probe = probe_for(&mut rng, Shape::new(2, 2, 3, 3));
        cases.push(Case {
            name: "scale_by_scalar".to_string(),
            params: vec![x],
            build: Box::new(move |tape, ids| {
                let y = tape.scale(ids[0], -1.7);
                probe_loss(tape, y, &probe)
            }),
        });
    }
    {
        let x = rand_t(&mut rng, 2, 2, 3, 3);
        let s = Tensor::scalar(rng.uniform(-2.0, 2.0));
        let probe = probe_for(&mut rng, Shape::new(2, 2, 3, 3));
        cases.push(Case {
            name: "mul_scalar".to_string(),
            params: vec![x, s],
            build: Box::new(move |tape, ids| {
                let y = tape.mul_scalar(ids[0], ids[1])?;
                probe_loss(tape, y, &probe)
            }),
        });
    }
    {
        let x = rand_t(&mut rng, 2, 2, 3, 3);
        cases.push(Case {
            name: "sum_all".to_string(),
            params: vec![x],
            build: Box::new(move |tape, ids| Ok(tape.sum_all(ids[0]))),
        });
    }
    {
        let x = rand_t(&mut rng, 2, 2, 3, 3);
        cases.push(Case {
            name: "mean_all".to_string(),
            params: vec![x],
            build: Box::new(move |tape, ids| Ok(tape.mean_all(ids[0]))),
        });
    }
    cases
}

/// Run every op case over the given seeds, folding per-case maxima.
pub fn check_ops(seeds: &[u64]) -> Vec<CheckReport> {
    let mut worst: Vec<CheckReport> = Vec::new();
    for &seed in seeds {
        for case in op_cases(seed) {
            let err = check_case(&case);
            match worst.iter_mut().find(|r| r.group == case.name) {
                Some(r) => r.max_rel_err = r.max_rel_err.max(err),
                None => worst.push(CheckReport {
                    group: case.name,
                    max_rel_err: err,
                    tol: OPS_TOL,
                }),
            }
        }
    }
    worst
}

/// Rebuild a parameter struct from a flat tensor list in visit order.
fn assign_flat<P>(proto: &P, flat: &[Tensor<f64>], visit_mut: impl Fn(&mut P, &mut dyn FnMut(&str, &mut Tensor<f64>))) -> P
where
    P: Clone,
{
    let mut out = proto.clone();
    let mut i = 0;
    visit_mut(&mut out, &mut |_, t| {
        *t = flat[i].clone();
        i += 1;
    });
    out
}

/// Full attention-fusion path: gradients of samplers, aggregation
/// convs, omegas, betas, and the inputs themselves.
pub fn check_ram(seeds: &[u64]) -> Vec<CheckReport> {
    let mut max_err = 0.0f64;
    for &seed in seeds {
        max_err = max_err.max(check_struct_case(seed, StructKind::Ram));
    }
    vec![CheckReport {
        group: "ram_fuse full path".to_string(),
        max_rel_err: max_err,
        tol: OPS_TOL,
    }]
}

enum StructKind {
    Ram,
    Gpr,
    RescaleSum,
}

/// Value-level runner for parameter-struct cases: evaluates the loss as
/// a function of (struct params ++ inputs) and compares tape gradients
/// with central differences.
fn check_struct_case(seed: u64, kind: StructKind) -> f64 {
    use crate::params::Binder;
    let mut rng = Rng::new(seed ^ 0xabcd);
    let width = 2;

    // prototypes and inputs
    let ram_proto = RamParams::<f64>::new(width, 2, vec![1, 2], true, &mut rng);
    let gpr_proto = GprParams::<f64>::new(width, 2, 2, &mut rng);
    let rs_proto = RescaleSumParams::<f64>::new(width, 2, 2, &mut rng);
    let inputs = [
        rand_t(&mut rng, 2, level_channels(width, 1), 8, 6),
        rand_t(&mut rng, 2, level_channels(width, 2), 4, 3),
    ];
    let probes = [
        probe_for(&mut rng, inputs[0].shape()),
        probe_for(&mut rng, inputs[1].shape()),
        probe_for(&mut rng, Shape::new(2, 2, 8, 6)),
    ];

    let mut flat: Vec<Tensor<f64>> = Vec::new();
    match kind {
        StructKind::Ram => ram_proto.visit("p", &mut |_, t| flat.push(t.clone())),
        StructKind::Gpr => gpr_proto.visit("p", &mut |_, t| flat.push(t.clone())),
        StructKind::RescaleSum => rs_proto.visit("p", &mut |_, t| flat.push(t.clone())),
    }
    let n_struct = flat.len();
    flat.extend(inputs.iter().cloned());

    // loss + gradients through the tape
    let run = |ps: &[Tensor<f64>], want_grads: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let struct_vals = &ps[..n_struct];
        let (bound_ids, loss) = match kind {
            StructKind::Ram => {
                let p = assign_flat(&ram_proto, struct_vals, |p, f| p.visit_mut("p", f));
                let bound = p.bind(&mut binder, "p");
                let ids = binder.finish();
                let in_ids: Vec<ValueId> =
                    ps[n_struct..].iter().map(|t| tape.param(t)).collect();
                let (outs, _) = bound.fuse(&mut tape, &in_ids, false).expect("fuse");
                let mut loss = None;
                for (o, probe) in outs.iter().zip(&probes) {
                    let l = probe_loss(&mut tape, *o, probe).expect("probe");
                    loss = Some(match loss {
                        None => l,
                        Some(acc) => tape.add(acc, l).expect("add"),
                    });
                }
                (
                    ids.into_iter()
                        .map(|(_, id)| id)
                        .chain(in_ids)
                        .collect::<Vec<_>>(),
                    loss.unwrap(),
                )
            }
            StructKind::Gpr => {
                let p = assign_flat(&gpr_proto, struct_vals, |p, f| p.visit_mut("p", f));
                let bound = p.bind(&mut binder, "p");
                let ids = binder.finish();
                let in_ids: Vec<ValueId> =
                    ps[n_struct..].iter().map(|t| tape.param(t)).collect();
                let hm = bound.apply(&mut tape, &in_ids).expect("gpr");
                let loss = probe_loss(&mut tape, hm, &probes[2]).expect("probe");
                (
                    ids.into_iter()
                        .map(|(_, id)| id)
                        .chain(in_ids)
                        .collect::<Vec<_>>(),
                    loss,
                )
            }
            StructKind::RescaleSum => {
                let p = assign_flat(&rs_proto, struct_vals, |p, f| p.visit_mut("p", f));
                let bound = p.bind(&mut binder, "p");
                let ids = binder.finish();
                let in_ids: Vec<ValueId> =
                    ps[n_struct..].iter().map(|t| tape.param(t)).collect();
                let hm = bound.apply(&mut tape, &in_ids).expect("rescale_sum");
                let loss = probe_loss(&mut tape, hm, &probes[2]).expect("probe");
                (
                    ids.into_iter()
                        .map(|(_, id)| id)
                        .chain(in_ids)
                        .collect::<Vec<_>>(),
                    loss,
                )
            }
        };
        let loss_val = tape.value(loss).item();
        if !want_grads {
            return (loss_val, Vec::new());
        }
        tape.backward(loss).expect("backward");
        let grads = bound_ids
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(id)))
            })
            .collect();
        (loss_val, grads)
    };

    let (_, grads) = run(&flat, true);
    let mut work = flat.clone();
    let mut max_err = 0.0f64;
    for pi in 0..work.len() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + FD_STEP;
            let (plus, _) = run(&work, false);
            work[pi].data_mut()[ei] = orig - FD_STEP;
            let (minus, _) = run(&work, false);
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(grads[pi].data()[ei], numeric));
        }
    }
    max_err
}

/// Refinement-head paths (both variants).
pub fn check_gpr(seeds: &[u64]) -> Vec<CheckReport> {
    let mut gpr_err = 0.0f64;
    let mut rs_err = 0.0f64;
    for &seed in seeds {
        gpr_err = gpr_err.max(check_struct_case(seed, StructKind::Gpr));
        rs_err = rs_err.max(check_struct_case(seed, StructKind::RescaleSum));
    }
    vec![
        CheckReport {
            group: "gpr_head full path".to_string(),
            max_rel_err: gpr_err,
            tol: OPS_TOL,
        },
        CheckReport {
            group: "rescale_sum_head full path".to_string(),
            max_rel_err: rs_err,
            tol: OPS_TOL,
        },
    ]
}

/// End-to-end network check on the tiny config: every parameter of the
/// model against central differences of the MSE training loss.
pub fn check_full(seeds: &[u64]) -> Vec<CheckReport> {
    let cfg = NetworkConfig {
        width: 4,
        num_stages: 2,
        blocks_per_stage: 1,
        input_h: 32,
        input_w: 24,
        num_keypoints: 2,
        ..NetworkConfig::default()
    };
    let mut max_err = 0.0f64;
    for &seed in seeds {
        let model: Model<f64> = build(&cfg, seed).expect("tiny config builds");
        let mut rng = Rng::new(seed ^ 0x5eed);
        let image = Tensor::<f64>::random_uniform(Shape::new(1, 3, 32, 24), 0.0, 1.0, &mut rng);
        let target = Tensor::<f64>::random_uniform(Shape::new(1, 2, 8, 6), 0.0, 1.0, &mut rng);

        let mut flat: Vec<Tensor<f64>> = Vec::new();
        model.visit_params(&mut |_, t| flat.push(t.clone()));

        let eval = |ps: &[Tensor<f64>]| -> f64 {
            let mut m = model.clone();
            let mut i = 0;
            m.visit_params_mut(&mut |_, t| {
                *t = ps[i].clone();
                i += 1;
            });
            let (hm, _) = m.forward(&image).expect("forward");
            mse_loss(&hm, &target).expect("mse")
        };

        // analytic gradients in the same visit order
        let mut traced = model.forward_traced(&image).expect("forward");
        let target_id = traced.tape.constant(&target);
        let loss = mse_on_tape(&mut traced.tape, traced.heatmap, target_id).expect("mse");
        traced.tape.backward(loss).expect("backward");
        let grads: Vec<Tensor<f64>> = traced
            .params
            .iter()
            .map(|(_, id)| {
                traced
                    .tape
                    .grad(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(traced.tape.shape(*id)))
            })
            .collect();

        let mut work = flat.clone();
        for pi in 0..work.len() {
            for ei in 0..work[pi].numel() {
                let orig = work[pi].data()[ei];
                work[pi].data_mut()[ei] = orig + FD_STEP;
                let plus = eval(&work);
                work[pi].data_mut()[ei] = orig - FD_STEP;
                let minus = eval(&work);
                work[pi].data_mut()[ei] = orig;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                max_err = max_err.max(rel_err(grads[pi].data()[ei], numeric));
            }
        }
    }
    vec![CheckReport {
        group: "full network (tiny config)".to_string(),
        max_rel_err: max_err,
        tol: FULL_TOL,
    }]
}
