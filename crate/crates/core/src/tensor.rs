//! Dense rank-4 tensor in row-major (n, c, h, w) order.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const SCALAR: Shape = Shape { n: 1, c: 1, h: 1, w: 1 };
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                axis: "data length",
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![S::ZERO; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: S) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// 1x1x1x1 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Shape::SCALAR,
            data: vec![value],
        }
    }

    /// Uniform in [-bound, bound] with `bound = sqrt(3 / fan_in)`
    /// (Kaiming-uniform, fan-in mode, linear gain).
    pub fn kaiming_uniform(shape: Shape, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| S::from_f64(rng.uniform(-bound, bound)))
            .collect();
        Tensor { shape, data }
    }

    pub fn random_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| S::from_f64(rng.uniform(lo, hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let i = self.idx(n, c, h, w);
        self.data[i] = v;
    }

    /// The single value of a 1x1x1x1 tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.shape, Shape::SCALAR, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mirror along the width axis.
    pub fn hflip(&self) -> Tensor<S> {
        let s = self.shape;
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        out.set(n, c, h, w, self.at(n, c, h, s.w - 1 - w));
                    }
                }
            }
        }
        out
    }

    /// One batch entry as a new tensor of batch size 1.
    pub fn slice_batch(&self, n: usize) -> Tensor<S> {
        let s = self.shape;
        let plane = s.c * s.h * s.w;
        Tensor {
            shape: Shape::new(1, s.c, s.h, s.w),
            data: self.data[n * plane..(n + 1) * plane].to_vec(),
        }
    }

    /// Stack batch-1 tensors of identical (c, h, w) into one batch.
    pub fn stack_batch(items: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = items.first().ok_or_else(|| {
            Error::precondition("stack_batch", "no tensors to stack")
        })?;
        let s = first.shape;
        let mut data = Vec::with_capacity(items.len() * s.numel());
        for t in items {
            if t.shape != s {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    axis: "element shape",
                    expected: s.numel(),
                    actual: t.shape.numel(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(items.len() * s.n, s.c, s.h, s.w),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert element type (used to lift f32 models into f64 checks).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let r = Tensor::<f64>::new(Shape::new(1, 2, 2, 2), vec![0.0; 7]);
        assert!(matches!(r, Err(Error::ShapeMismatch { expected: 8, actual: 7, .. })));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f64>::new(
            Shape::new(1, 2, 2, 3),
            (0..12).map(|i| i as f64).collect(),
        )
        .unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 1, 2), 5.0);
        assert_eq!(t.at(0, 1, 0, 0), 6.0);
        assert_eq!(t.at(0, 1, 1, 1), 10.0);
    }

    #[test]
    fn hflip_is_involution() {
        let mut rng = Rng::new(5);
        let t = Tensor::<f64>::random_uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut rng);
        assert_eq!(t.hflip().hflip(), t);
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = Rng::new(11);
        let t = Tensor::<f32>::kaiming_uniform(Shape::new(8, 4, 3, 3), 36, &mut rng);
        let bound = (3.0f32 / 36.0).sqrt() + 1e-6;
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn stack_batch_roundtrips_slice_batch() {
        let mut rng = Rng::new(2);
        let t = Tensor::<f32>::random_uniform(Shape::new(3, 2, 2, 2), 0.0, 1.0, &mut rng);
        let parts: Vec<_> = (0..3).map(|n| t.slice_batch(n)).collect();
        assert_eq!(Tensor::stack_batch(&parts).unwrap(), t);
    }
}
