//! Reverse-mode autodiff over rank-4 tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node in
//! creation order; [`Tape::backward`] replays the nodes in exact reverse
//! order, accumulating gradients by the chain rule. Repeated use of a
//! value sums its gradients.
//!
//! Convolution uses the cross-correlation convention. Bilinear resizing
//! uses the align-corners=false sampling grid.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        pad: usize,
    },
    Deconv2d {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        pad: usize,
    },
    BilinearResize {
        x: ValueId,
    },
    GlobalAvgPool {
        x: ValueId,
    },
    BatchMean {
        x: ValueId,
    },
    SoftmaxChannels {
        x: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    ConcatChannels {
        a: ValueId,
        b: ValueId,
    },
    ChannelSlice {
        x: ValueId,
        ch: usize,
    },
    Relu {
        x: ValueId,
    },
    Scale {
        x: ValueId,
        factor: S,
    },
    MulScalar {
        x: ValueId,
        s: ValueId,
    },
    SumAll {
        x: ValueId,
    },
    MeanAll {
        x: ValueId,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Indices `i` in `[0, iter_size)` with `i*stride + k_off - pad` inside
/// `[0, addr_size)`. Shared by conv (iterate output) and deconv
/// (iterate input).
fn valid_positions(
    iter_size: usize,
    addr_size: usize,
    stride: usize,
    pad: usize,
    k_off: usize,
) -> Option<(usize, usize)> {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let top = addr_size - 1 + pad;
    if top < k_off {
        return None;
    }
    let hi = ((top - k_off) / stride).min(iter_size - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    for (axis, ea, eb) in [
        ("batch", a.n, b.n),
        ("channels", a.c, b.c),
        ("height", a.h, b.h),
        ("width", a.w, b.w),
    ] {
        if ea != eb {
            return Err(Error::ShapeMismatch {
                op,
                axis,
                expected: ea,
                actual: eb,
            });
        }
    }
    Ok(())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, trainable: bool) -> ValueId {
        self.push(Op::Leaf, value, trainable)
    }

    /// Trainable leaf (clones the parameter into the tape).
    pub fn param(&mut self, t: &Tensor<S>) -> ValueId {
        self.leaf(t.clone(), true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: &Tensor<S>) -> ValueId {
        self.leaf(t.clone(), false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: ValueId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        id
    }

    fn derive(&mut self, op: Op<S>, value: Tensor<S>, inputs: &[ValueId]) -> ValueId {
        let requires = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(op, value, requires)
    }

    // ── Forward operations ──────────────────────────────────────────

    /// Cross-correlation with weight (c_out, c_in, kh, kw) and optional
    /// bias (1, c_out, 1, 1). Output spatial size is
    /// `(in + 2*pad - k)/stride + 1` per axis. Kernel sides must be odd.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (c_out, c_in, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
        if stride < 1 {
            return Err(Error::precondition("conv2d", "stride must be >= 1"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::precondition(
                "conv2d",
                format!("kernel sides must be odd, got {}x{}", kh, kw),
            ));
        }
        if xs.c != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                axis: "input channels",
                expected: c_in,
                actual: xs.c,
            });
        }
        if xs.h + 2 * pad < kh || xs.w + 2 * pad < kw {
            return Err(Error::precondition(
                "conv2d",
                format!(
                    "kernel {}x{} does not fit padded input {}x{}",
                    kh,
                    kw,
                    xs.h + 2 * pad,
                    xs.w + 2 * pad
                ),
            ));
        }
        if let Some(bid) = b {
            let bs = self.shape(bid);
            if bs != Shape::new(1, c_out, 1, 1) {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    axis: "bias channels",
                    expected: c_out,
                    actual: bs.c,
                });
            }
        }
        let out_h = (xs.h + 2 * pad - kh) / stride + 1;
        let out_w = (xs.w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(Shape::new(xs.n, c_out, out_h, out_w));
        if let Some(bid) = b {
            let bd = self.value(bid).data().to_vec();
            let od = out.data_mut();
            for n in 0..xs.n {
                for (co, &bv) in bd.iter().enumerate() {
                    let base = (n * c_out + co) * out_h * out_w;
                    od[base..base + out_h * out_w].fill(bv);
                }
            }
        }
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let od = out.data_mut();
            for n in 0..xs.n {
                for co in 0..c_out {
                    let out_base = (n * c_out + co) * out_h * out_w;
                    for ci in 0..c_in {
                        let x_base = (n * xs.c + ci) * xs.h * xs.w;
                        let w_base = (co * c_in + ci) * kh * kw;
                        for ky in 0..kh {
                            let Some((oy_lo, oy_hi)) =
                                valid_positions(out_h, xs.h, stride, pad, ky)
                            else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some((ox_lo, ox_hi)) =
                                    valid_positions(out_w, xs.w, stride, pad, kx)
                                else {
                                    continue;
                                };
                                let wv = wd[w_base + ky * kw + kx];
                                for oy in oy_lo..=oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let x_row = x_base + iy * xs.w;
                                    let o_row = out_base + oy * out_w;
                                    for ox in ox_lo..=ox_hi {
                                        let ix = ox * stride + kx - pad;
                                        od[o_row + ox] += wv * xd[x_row + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let inputs: Vec<ValueId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.derive(Op::Conv2d { x, w, b, stride, pad }, out, &inputs))
    }

    /// Transposed convolution with weight (c_in, c_out, kh, kw) and
    /// optional bias. Output spatial size is `(in - 1)*stride - 2*pad + k`.
    pub fn deconv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (c_in, c_out, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
        if stride < 1 {
            return Err(Error::precondition("deconv2d", "stride must be >= 1"));
        }
        if xs.c != c_in {
            return Err(Error::ShapeMismatch {
                op: "deconv2d",
                axis: "input channels",
                expected: c_in,
                actual: xs.c,
            });
        }
        let oh = (xs.h - 1) * stride + kh;
        let ow = (xs.w - 1) * stride + kw;
        if oh <= 2 * pad || ow <= 2 * pad {
            return Err(Error::precondition(
                "deconv2d",
                format!("padding {} swallows the whole {}x{} output", pad, oh, ow),
            ));
        }
        let (out_h, out_w) = (oh - 2 * pad, ow - 2 * pad);
        if let Some(bid) = b {
            let bs = self.shape(bid);
            if bs != Shape::new(1, c_out, 1, 1) {
                return Err(Error::ShapeMismatch {
                    op: "deconv2d",
                    axis: "bias channels",
                    expected: c_out,
                    actual: bs.c,
                });
            }
        }
        let mut out = Tensor::zeros(Shape::new(xs.n, c_out, out_h, out_w));
        if let Some(bid) = b {
            let bd = self.value(bid).data().to_vec();
            let od = out.data_mut();
            for n in 0..xs.n {
                for (co, &bv) in bd.iter().enumerate() {
                    let base = (n * c_out + co) * out_h * out_w;
                    od[base..base + out_h * out_w].fill(bv);
                }
            }
        }
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let od = out.data_mut();
            for n in 0..xs.n {
                for ci in 0..c_in {
                    let x_base = (n * xs.c + ci) * xs.h * xs.w;
                    for co in 0..c_out {
                        let out_base = (n * c_out + co) * out_h * out_w;
                        let w_base = (ci * c_out + co) * kh * kw;
                        for ky in 0..kh {
                            let Some((iy_lo, iy_hi)) =
                                valid_positions(xs.h, out_h, stride, pad, ky)
                            else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some((ix_lo, ix_hi)) =
                                    valid_positions(xs.w, out_w, stride, pad, kx)
                                else {
                                    continue;
                                };
                                let wv = wd[w_base + ky * kw + kx];
                                for iy in iy_lo..=iy_hi {
                                    let oy = iy * stride + ky - pad;
                                    let x_row = x_base + iy * xs.w;
                                    let o_row = out_base + oy * out_w;
                                    for ix in ix_lo..=ix_hi {
                                        let ox = ix * stride + kx - pad;
                                        od[o_row + ox] += wv * xd[x_row + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let inputs: Vec<ValueId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.derive(Op::Deconv2d { x, w, b, stride, pad }, out, &inputs))
    }

    /// Bilinear resize, align-corners=false: source sample centers at
    /// `(i + 0.5) * in/out - 0.5`, clamped to the input. Resizing to the
    /// same size is a bit-exact copy.
    pub fn bilinear_resize(&mut self, x: ValueId, out_h: usize, out_w: usize) -> Result<ValueId> {
        let xs = self.shape(x);
        if out_h < 1 || out_w < 1 {
            return Err(Error::precondition(
                "bilinear_resize",
                "output dims must be >= 1",
            ));
        }
        let out = if out_h == xs.h && out_w == xs.w {
            self.value(x).clone()
        } else {
            let ytab = resize_axis_table(xs.h, out_h);
            let xtab = resize_axis_table(xs.w, out_w);
            let xd = self.value(x).data();
            let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, out_h, out_w));
            let od = out.data_mut();
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let in_base = (n * xs.c + c) * xs.h * xs.w;
                    let out_base = (n * xs.c + c) * out_h * out_w;
                    for (oy, &(y0, y1, fy)) in ytab.iter().enumerate() {
                        let r0 = in_base + y0 * xs.w;
                        let r1 = in_base + y1 * xs.w;
                        let o_row = out_base + oy * out_w;
                        for (ox, &(x0, x1, fx)) in xtab.iter().enumerate() {
                            let w00 = S::from_f64((1.0 - fy) * (1.0 - fx));
                            let w01 = S::from_f64((1.0 - fy) * fx);
                            let w10 = S::from_f64(fy * (1.0 - fx));
                            let w11 = S::from_f64(fy * fx);
                            od[o_row + ox] = w00 * xd[r0 + x0]
                                + w01 * xd[r0 + x1]
                                + w10 * xd[r1 + x0]
                                + w11 * xd[r1 + x1];
                        }
                    }
                }
            }
            out
        };
        Ok(self.derive(Op::BilinearResize { x }, out, &[x]))
    }

    /// Mean over each (h, w) plane; output (n, c, 1, 1).
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let xs = self.shape(x);
        if xs.h == 0 || xs.w == 0 {
            return Err(Error::precondition(
                "global_avg_pool",
                "spatial dims must be >= 1",
            ));
        }
        let inv = S::from_f64(1.0 / (xs.h * xs.w) as f64);
        let xd = self.value(x).data();
        let plane = xs.h * xs.w;
        let mut data = Vec::with_capacity(xs.n * xs.c);
        for nc in 0..xs.n * xs.c {
            let sum: S = xd[nc * plane..(nc + 1) * plane].iter().copied().sum();
            data.push(sum * inv);
        }
        let out = Tensor::new(Shape::new(xs.n, xs.c, 1, 1), data).expect("pool shape");
        Ok(self.derive(Op::GlobalAvgPool { x }, out, &[x]))
    }

    /// Mean over the batch axis; output (1, c, h, w).
    pub fn batch_mean(&mut self, x: ValueId) -> ValueId {
        let xs = self.shape(x);
        let plane = xs.c * xs.h * xs.w;
        let inv = S::from_f64(1.0 / xs.n as f64);
        let xd = self.value(x).data();
        let mut data = vec![S::ZERO; plane];
        for n in 0..xs.n {
            for (o, v) in data.iter_mut().zip(&xd[n * plane..(n + 1) * plane]) {
                *o += *v;
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let out = Tensor::new(Shape::new(1, xs.c, xs.h, xs.w), data).expect("batch_mean shape");
        self.derive(Op::BatchMean { x }, out, &[x])
    }

    /// Stable softmax over the channel axis, independently per (n, h, w).
    pub fn softmax_channels(&mut self, x: ValueId) -> ValueId {
        let xs = self.shape(x);
        let xd = self.value(x).data();
        let mut out = Tensor::zeros(xs);
        let od = out.data_mut();
        let plane = xs.h * xs.w;
        for n in 0..xs.n {
            for p in 0..plane {
                let mut m = xd[(n * xs.c) * plane + p];
                for c in 1..xs.c {
                    m = m.max(xd[(n * xs.c + c) * plane + p]);
                }
                let mut total = S::ZERO;
                for c in 0..xs.c {
                    let e = (xd[(n * xs.c + c) * plane + p] - m).exp();
                    od[(n * xs.c + c) * plane + p] = e;
                    total += e;
                }
                for c in 0..xs.c {
                    od[(n * xs.c + c) * plane + p] /= total;
                }
            }
        }
        self.derive(Op::SoftmaxChannels { x }, out, &[x])
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a), data).expect("add shape");
        Ok(self.derive(Op::Add { a, b }, out, &[a, b]))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::new(self.shape(a), data).expect("sub shape");
        Ok(self.derive(Op::Sub { a, b }, out, &[a, b]))
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data).expect("mul shape");
        Ok(self.derive(Op::Mul { a, b }, out, &[a, b]))
    }

    /// Channel concatenation; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        for (axis, ea, eb) in [("batch", sa.n, sb.n), ("height", sa.h, sb.h), ("width", sa.w, sb.w)]
        {
            if ea != eb {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    axis,
                    expected: ea,
                    actual: eb,
                });
            }
        }
        let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let plane = sa.h * sa.w;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..sa.n {
            data.extend_from_slice(&ad[n * sa.c * plane..(n + 1) * sa.c * plane]);
            data.extend_from_slice(&bd[n * sb.c * plane..(n + 1) * sb.c * plane]);
        }
        let out = Tensor::new(out_shape, data).expect("concat shape");
        Ok(self.derive(Op::ConcatChannels { a, b }, out, &[a, b]))
    }

    /// Single channel as an (n, 1, h, w) tensor.
    pub fn channel_slice(&mut self, x: ValueId, ch: usize) -> Result<ValueId> {
        let xs = self.shape(x);
        if ch >= xs.c {
            return Err(Error::ShapeMismatch {
                op: "channel_slice",
                axis: "channels",
                expected: xs.c,
                actual: ch,
            });
        }
        let plane = xs.h * xs.w;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xs.n * plane);
        for n in 0..xs.n {
            let base = (n * xs.c + ch) * plane;
            data.extend_from_slice(&xd[base..base + plane]);
        }
        let out = Tensor::new(Shape::new(xs.n, 1, xs.h, xs.w), data).expect("slice shape");
        Ok(self.derive(Op::ChannelSlice { x, ch }, out, &[x]))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(|v| v.max(S::ZERO));
        self.derive(Op::Relu { x }, out, &[x])
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, x: ValueId, factor: S) -> ValueId {
        let out = self.value(x).map(|v| v * factor);
        self.derive(Op::Scale { x, factor }, out, &[x])
    }

    /// Multiply every element by a traced 1x1x1x1 scalar.
    pub fn mul_scalar(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        let ss = self.shape(s);
        if ss != Shape::SCALAR {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                axis: "scalar numel",
                expected: 1,
                actual: ss.numel(),
            });
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        Ok(self.derive(Op::MulScalar { x, s }, out, &[x, s]))
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let sum: S = self.value(x).data().iter().copied().sum();
        self.derive(Op::SumAll { x }, Tensor::scalar(sum), &[x])
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let n = self.value(x).numel().max(1);
        let sum: S = self.value(x).data().iter().copied().sum();
        let mean = sum * S::from_f64(1.0 / n as f64);
        self.derive(Op::MeanAll { x }, Tensor::scalar(mean), &[x])
    }

    // ── Cost accounting ─────────────────────────────────────────────

    /// Total FLOPs of the recorded convolutions and deconvolutions
    /// (2 per multiply-accumulate, plus bias adds).
    pub fn flops(&self) -> u64 {
        let mut total = 0u64;
        for node in &self.nodes {
            match node.op {
                Op::Conv2d { x, w, b, .. } => {
                    let os = node.value.shape();
                    let ws = self.nodes[w.0].value.shape();
                    let _ = x;
                    let macs = (ws.c * ws.h * ws.w) as u64 * os.numel() as u64;
                    total += 2 * macs;
                    if b.is_some() {
                        total += os.numel() as u64;
                    }
                }
                Op::Deconv2d { x, w, b, .. } => {
                    let xs = self.nodes[x.0].value.shape();
                    let ws = self.nodes[w.0].value.shape();
                    let macs = xs.numel() as u64 * (ws.c * ws.h * ws.w) as u64;
                    total += 2 * macs;
                    if b.is_some() {
                        total += node.value.numel() as u64;
                    }
                }
                _ => {}
            }
        }
        total
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; accumulates `d loss / d v` for
    /// every tracked value `v`.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.shape(loss) != Shape::SCALAR {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_string(),
            });
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(S::ONE));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let grad = self.nodes[i].grad.clone().expect("checked above");
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.backward_conv2d(x, w, b, stride, pad, &grad);
                }
                Op::Deconv2d { x, w, b, stride, pad } => {
                    self.backward_deconv2d(x, w, b, stride, pad, &grad);
                }
                Op::BilinearResize { x } => {
                    let xs = self.shape(x);
                    let gs = grad.shape();
                    if !self.wants_grad(x) {
                        continue;
                    }
                    let mut dx = Tensor::zeros(xs);
                    if gs.h == xs.h && gs.w == xs.w {
                        dx.data_mut().copy_from_slice(grad.data());
                    } else {
                        let ytab = resize_axis_table(xs.h, gs.h);
                        let xtab = resize_axis_table(xs.w, gs.w);
                        let gd = grad.data();
                        let dxd = dx.data_mut();
                        for n in 0..xs.n {
                            for c in 0..xs.c {
                                let in_base = (n * xs.c + c) * xs.h * xs.w;
                                let out_base = (n * xs.c + c) * gs.h * gs.w;
                                for (oy, &(y0, y1, fy)) in ytab.iter().enumerate() {
                                    for (ox, &(x0, x1, fx)) in xtab.iter().enumerate() {
                                        let g = gd[out_base + oy * gs.w + ox];
                                        dxd[in_base + y0 * xs.w + x0] +=
                                            g * S::from_f64((1.0 - fy) * (1.0 - fx));
                                        dxd[in_base + y0 * xs.w + x1] +=
                                            g * S::from_f64((1.0 - fy) * fx);
                                        dxd[in_base + y1 * xs.w + x0] +=
                                            g * S::from_f64(fy * (1.0 - fx));
                                        dxd[in_base + y1 * xs.w + x1] +=
                                            g * S::from_f64(fy * fx);
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::GlobalAvgPool { x } => {
                    if !self.wants_grad(x) {
                        continue;
                    }
                    let xs = self.shape(x);
                    let inv = S::from_f64(1.0 / (xs.h * xs.w) as f64);
                    let mut dx = Tensor::zeros(xs);
                    let gd = grad.data();
                    let plane = xs.h * xs.w;
                    let dxd = dx.data_mut();
                    for nc in 0..xs.n * xs.c {
                        let g = gd[nc] * inv;
                        dxd[nc * plane..(nc + 1) * plane].fill(g);
                    }
                    self.accumulate(x, &dx);
                }
                Op::BatchMean { x } => {
                    if !self.wants_grad(x) {
                        continue;
                    }
                    let xs = self.shape(x);
                    let inv = S::from_f64(1.0 / xs.n as f64);
                    let plane = xs.c * xs.h * xs.w;
                    let mut dx = Tensor::zeros(xs);
                    let gd = grad.data();
                    let dxd = dx.data_mut();
                    for n in 0..xs.n {
                        for (o, g) in dxd[n * plane..(n + 1) * plane].iter_mut().zip(gd) {
                            *o = *g * inv;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxChannels { x } => {
                    if !self.wants_grad(x) {
                        continue;
                    }
                    let xs = self.shape(x);
                    let sd = self.nodes[i].value.clone();
                    let sdd = sd.data();
                    let gd = grad.data();
                    let mut dx = Tensor::zeros(xs);
                    let dxd = dx.data_mut();
                    let plane = xs.h * xs.w;
                    for n in 0..xs.n {
                        for p in 0..plane {
                            let mut dot = S::ZERO;
                            for c in 0..xs.c {
                                let k = (n * xs.c + c) * plane + p;
                                dot += gd[k] * sdd[k];
                            }
                            for c in 0..xs.c {
                                let k = (n * xs.c + c) * plane + p;
                                dxd[k] = sdd[k] * (gd[k] - dot);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &grad);
                    let neg = grad.map(|v| -v);
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.wants_grad(a) {
                        let da_data: Vec<S> = grad
                            .data()
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(&g, &bv)| g * bv)
                            .collect();
                        let da = Tensor::new(grad.shape(), da_data).expect("mul grad");
                        self.accumulate(a, &da);
                    }
                    if self.wants_grad(b) {
                        let db_data: Vec<S> = grad
                            .data()
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(&g, &av)| g * av)
                            .collect();
                        let db = Tensor::new(grad.shape(), db_data).expect("mul grad");
                        self.accumulate(b, &db);
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let (sa, sb) = (self.shape(a), self.shape(b));
                    let plane = sa.h * sa.w;
                    let gd = grad.data();
                    if self.wants_grad(a) {
                        let mut da = Tensor::zeros(sa);
                        let dad = da.data_mut();
                        for n in 0..sa.n {
                            let g_base = n * (sa.c + sb.c) * plane;
                            dad[n * sa.c * plane..(n + 1) * sa.c * plane]
                                .copy_from_slice(&gd[g_base..g_base + sa.c * plane]);
                        }
                        self.accumulate(a, &da);
                    }
                    if self.wants_grad(b) {
                        let mut db = Tensor::zeros(sb);
                        let dbd = db.data_mut();
                        for n in 0..sb.n {
                            let g_base = n * (sa.c + sb.c) * plane + sa.c * plane;
                            dbd[n * sb.c * plane..(n + 1) * sb.c * plane]
                                .copy_from_slice(&gd[g_base..g_base + sb.c * plane]);
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::ChannelSlice { x, ch } => {
                    if !self.wants_grad(x) {
                        continue;
                    }
                    let xs = self.shape(x);
                    let plane = xs.h * xs.w;
                    let mut dx = Tensor::zeros(xs);
                    let gd = grad.data();
                    let dxd = dx.data_mut();
                    for n in 0..xs.n {
                        let base = (n * xs.c + ch) * plane;
                        dxd[base..base + plane].copy_from_slice(&gd[n * plane..(n + 1) * plane]);
                    }
                    self.accumulate(x, &dx);
                }
                Op::Relu { x } => {
                    if !self.wants_grad(x) {
                        continue;
                    }
                    let dx_data: Vec<S> = grad
                        .data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(&g, &v)| if v > S::ZERO { g } else { S::ZERO })
                        .collect();
                    let dx = Tensor::new(grad.shape(), dx_data).expect("relu grad");
                    self.accumulate(x, &dx);
                }
                Op::Scale { x, factor } => {
                    let dx = grad.map(|g| g * factor);
                    self.accumulate(x, &dx);
                }
                Op::MulScalar { x, s } => {
                    let sv = self.value(s).item();
                    if self.wants_grad(x) {
                        let dx = grad.map(|g| g * sv);
                        self.accumulate(x, &dx);
                    }
                    if self.wants_grad(s) {
                        let ds: S = grad
                            .data()
                            .iter()
                            .zip(self.value(x).data())
                            .map(|(&g, &xv)| g * xv)
                            .sum();
                        self.accumulate(s, &Tensor::scalar(ds));
                    }
                }
                Op::SumAll { x } => {
                    if !self.wants_grad(x) {
                        continue;
                    }
                    let dx = Tensor::full(self.shape(x), grad.item());
                    self.accumulate(x, &dx);
                }
                Op::MeanAll { x } => {
                    if !self.wants_grad(x) {
                        continue;
                    }
                    let xs = self.shape(x);
                    let g = grad.item() * S::from_f64(1.0 / xs.numel().max(1) as f64);
                    let dx = Tensor::full(xs, g);
                    self.accumulate(x, &dx);
                }
            }
        }
        Ok(())
    }

    fn wants_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accumulate(&mut self, id: ValueId, delta: &Tensor<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(node.value.shape(), delta.shape(), "gradient shape mismatch");
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            None => node.grad = Some(delta.clone()),
        }
    }

    fn backward_conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        pad: usize,
        grad: &Tensor<S>,
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let gs = grad.shape();
        let (c_out, c_in, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
        let (need_dx, need_dw) = (self.wants_grad(x), self.wants_grad(w));
        let gd = grad.data();
        if need_dx || need_dw {
            let mut dx = Tensor::zeros(xs);
            let mut dw = Tensor::zeros(ws);
            {
                let xd = self.value(x).data();
                let wd = self.value(w).data();
                let dxd = dx.data_mut();
                let dwd = dw.data_mut();
                for n in 0..xs.n {
                    for co in 0..c_out {
                        let g_base = (n * c_out + co) * gs.h * gs.w;
                        for ci in 0..c_in {
                            let x_base = (n * xs.c + ci) * xs.h * xs.w;
                            let w_base = (co * c_in + ci) * kh * kw;
                            for ky in 0..kh {
                                let Some((oy_lo, oy_hi)) =
                                    valid_positions(gs.h, xs.h, stride, pad, ky)
                                else {
                                    continue;
                                };
                                for kx in 0..kw {
                                    let Some((ox_lo, ox_hi)) =
                                        valid_positions(gs.w, xs.w, stride, pad, kx)
                                    else {
                                        continue;
                                    };
                                    let wv = wd[w_base + ky * kw + kx];
                                    let mut acc = S::ZERO;
                                    for oy in oy_lo..=oy_hi {
                                        let iy = oy * stride + ky - pad;
                                        let x_row = x_base + iy * xs.w;
                                        let g_row = g_base + oy * gs.w;
                                        for ox in ox_lo..=ox_hi {
                                            let ix = ox * stride + kx - pad;
                                            let g = gd[g_row + ox];
                                            if need_dx {
                                                dxd[x_row + ix] += wv * g;
                                            }
                                            acc += xd[x_row + ix] * g;
                                        }
                                    }
                                    dwd[w_base + ky * kw + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if need_dx {
                self.accumulate(x, &dx);
            }
            if need_dw {
                self.accumulate(w, &dw);
            }
        }
        if let Some(bid) = b {
            if self.wants_grad(bid) {
                let mut db = Tensor::zeros(Shape::new(1, c_out, 1, 1));
                let dbd = db.data_mut();
                for n in 0..gs.n {
                    for (co, slot) in dbd.iter_mut().enumerate() {
                        let base = (n * c_out + co) * gs.h * gs.w;
                        *slot += gd[base..base + gs.h * gs.w].iter().copied().sum();
                    }
                }
                self.accumulate(bid, &db);
            }
        }
    }

    fn backward_deconv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        pad: usize,
        grad: &Tensor<S>,
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let gs = grad.shape();
        let (c_in, c_out, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
        let (need_dx, need_dw) = (self.wants_grad(x), self.wants_grad(w));
        let gd = grad.data();
        if need_dx || need_dw {
            let mut dx = Tensor::zeros(xs);
            let mut dw = Tensor::zeros(ws);
            {
                let xd = self.value(x).data();
                let wd = self.value(w).data();
                let dxd = dx.data_mut();
                let dwd = dw.data_mut();
                for n in 0..xs.n {
                    for ci in 0..c_in {
                        let x_base = (n * xs.c + ci) * xs.h * xs.w;
                        for co in 0..c_out {
                            let g_base = (n * c_out + co) * gs.h * gs.w;
                            let w_base = (ci * c_out + co) * kh * kw;
                            for ky in 0..kh {
                                let Some((iy_lo, iy_hi)) =
                                    valid_positions(xs.h, gs.h, stride, pad, ky)
                                else {
                                    continue;
                                };
                                for kx in 0..kw {
                                    let Some((ix_lo, ix_hi)) =
                                        valid_positions(xs.w, gs.w, stride, pad, kx)
                                    else {
                                        continue;
                                    };
                                    let wv = wd[w_base + ky * kw + kx];
                                    let mut acc = S::ZERO;
                                    for iy in iy_lo..=iy_hi {
                                        let oy = iy * stride + ky - pad;
                                        let x_row = x_base + iy * xs.w;
                                        let g_row = g_base + oy * gs.w;
                                        for ix in ix_lo..=ix_hi {
                                            let ox = ix * stride + kx - pad;
                                            let g = gd[g_row + ox];
                                            if need_dx {
                                                dxd[x_row + ix] += wv * g;
                                            }
                                            acc += xd[x_row + ix] * g;
                                        }
                                    }
                                    dwd[w_base + ky * kw + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if need_dx {
                self.accumulate(x, &dx);
            }
            if need_dw {
                self.accumulate(w, &dw);
            }
        }
        if let Some(bid) = b {
            if self.wants_grad(bid) {
                let mut db = Tensor::zeros(Shape::new(1, c_out, 1, 1));
                let dbd = db.data_mut();
                for n in 0..gs.n {
                    for (co, slot) in dbd.iter_mut().enumerate() {
                        let base = (n * c_out + co) * gs.h * gs.w;
                        *slot += gd[base..base + gs.h * gs.w].iter().copied().sum();
                    }
                }
                self.accumulate(bid, &db);
            }
        }
    }
}

/// Per-output-index sampling table (lo index, hi index, hi fraction)
/// for align-corners=false bilinear interpolation.
fn resize_axis_table(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_size - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_size - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}
