//! Resolution-pyramid conventions.
//!
//! Level r (1-based) halves the spatial dims and doubles the channel
//! count of level r-1: channels `width * 2^(r-1)`, spatial
//! `(h1 / 2^(r-1), w1 / 2^(r-1))`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn level_channels(width: usize, level: usize) -> usize {
    width << (level - 1)
}

/// Check that `levels[h-1]` has level-h channels and exactly halved
/// spatial dims relative to its predecessor.
pub fn validate_pyramid<S: Scalar>(width: usize, levels: &[Tensor<S>]) -> Result<()> {
    let first = levels
        .first()
        .ok_or_else(|| Error::precondition("pyramid", "no levels"))?;
    let (h1, w1, n) = (first.shape().h, first.shape().w, first.shape().n);
    for (idx, t) in levels.iter().enumerate() {
        let level = idx + 1;
        let s = t.shape();
        let div = 1usize << idx;
        if !h1.is_multiple_of(div) || !w1.is_multiple_of(div) {
            return Err(Error::PyramidShape {
                level,
                what: format!("level-1 dims {h1}x{w1} not divisible by {div}"),
            });
        }
        let want_c = level_channels(width, level);
        if s.c != want_c {
            return Err(Error::PyramidShape {
                level,
                what: format!("expected {want_c} channels, got {}", s.c),
            });
        }
        if s.h != h1 / div || s.w != w1 / div {
            return Err(Error::PyramidShape {
                level,
                what: format!(
                    "expected spatial {}x{}, got {}x{}",
                    h1 / div,
                    w1 / div,
                    s.h,
                    s.w
                ),
            });
        }
        if s.n != n {
            return Err(Error::PyramidShape {
                level,
                what: format!("expected batch {n}, got {}", s.n),
            });
        }
    }
    Ok(())
}
