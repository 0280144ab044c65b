//! Learnable-parameter containers and tape binding.
//!
//! Parameter structs own plain tensors; `bind` copies them onto a tape as
//! trainable leaves and returns a bound mirror whose `apply` builds the
//! forward graph. [`Binder`] records every `(name, id)` pair in binding
//! order so the trainer can fetch gradients after `backward`.

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Shape, Tensor};

/// Collects named trainable leaves while a model binds itself to a tape.
pub struct Binder<'t, S: Scalar> {
    pub tape: &'t mut Tape<S>,
    named: Vec<(String, ValueId)>,
}

impl<'t, S: Scalar> Binder<'t, S> {
    pub fn new(tape: &'t mut Tape<S>) -> Self {
        Binder {
            tape,
            named: Vec::new(),
        }
    }

    pub fn param(&mut self, name: String, t: &Tensor<S>) -> ValueId {
        let id = self.tape.param(t);
        self.named.push((name, id));
        id
    }

    pub fn finish(self) -> Vec<(String, ValueId)> {
        self.named
    }
}

/// Visitor over a parameter collection; names match `Binder` names.
pub type Visit<'a, S> = &'a mut dyn FnMut(&str, &Tensor<S>);
pub type VisitMut<'a, S> = &'a mut dyn FnMut(&str, &mut Tensor<S>);

// ── Convolution parameters ──────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Conv2dParams<S: Scalar> {
    /// (c_out, c_in, kh, kw)
    pub weight: Tensor<S>,
    /// (1, c_out, 1, 1) when present
    pub bias: Option<Tensor<S>>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2dParams<S> {
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        Conv2dParams {
            weight: Tensor::kaiming_uniform(Shape::new(c_out, c_in, k, k), fan_in, rng),
            bias: with_bias.then(|| Tensor::zeros(Shape::new(1, c_out, 1, 1))),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn visit(&self, prefix: &str, f: Visit<S>) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMut<S>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub fn bind(&self, b: &mut Binder<S>, prefix: &str) -> BoundConv2d {
        BoundConv2d {
            w: b.param(format!("{prefix}.weight"), &self.weight),
            b: self
                .bias
                .as_ref()
                .map(|t| b.param(format!("{prefix}.bias"), t)),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConv2d {
    pub w: ValueId,
    pub b: Option<ValueId>,
    pub stride: usize,
    pub pad: usize,
}

impl BoundConv2d {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: ValueId) -> Result<ValueId> {
        tape.conv2d(x, self.w, self.b, self.stride, self.pad)
    }
}

// ── Transposed convolution parameters ───────────────────────────────

#[derive(Clone, Debug)]
pub struct Deconv2dParams<S: Scalar> {
    /// (c_in, c_out, kh, kw)
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Deconv2dParams<S> {
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        Deconv2dParams {
            weight: Tensor::kaiming_uniform(Shape::new(c_in, c_out, k, k), fan_in, rng),
            bias: with_bias.then(|| Tensor::zeros(Shape::new(1, c_out, 1, 1))),
            stride,
            pad,
        }
    }

    pub fn visit(&self, prefix: &str, f: Visit<S>) {
        f(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMut<S>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub fn bind(&self, b: &mut Binder<S>, prefix: &str) -> BoundDeconv2d {
        BoundDeconv2d {
            w: b.param(format!("{prefix}.weight"), &self.weight),
            b: self
                .bias
                .as_ref()
                .map(|t| b.param(format!("{prefix}.bias"), t)),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDeconv2d {
    pub w: ValueId,
    pub b: Option<ValueId>,
    pub stride: usize,
    pub pad: usize,
}

impl BoundDeconv2d {
    pub fn apply<S: Scalar>(&self, tape: &mut Tape<S>, x: ValueId) -> Result<ValueId> {
        tape.deconv2d(x, self.w, self.b, self.stride, self.pad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_count_includes_bias() {
        let mut rng = Rng::new(1);
        let p = Conv2dParams::<f32>::init(2, 3, 1, 1, 0, true, &mut rng);
        let mut count = 0usize;
        p.visit("c", &mut |_, t| count += t.numel());
        assert_eq!(count, 2 * 3 + 3);
    }

    #[test]
    fn binder_names_match_visit_names() {
        let mut rng = Rng::new(2);
        let p = Deconv2dParams::<f32>::init(4, 2, 4, 2, 1, true, &mut rng);
        let mut visit_names = Vec::new();
        p.visit("up", &mut |n, _| visit_names.push(n.to_string()));

        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        p.bind(&mut binder, "up");
        let bound_names: Vec<String> = binder.finish().into_iter().map(|(n, _)| n).collect();
        assert_eq!(visit_names, bound_names);
    }
}
