//! Inference post-processing: flip-averaged heatmaps and quarter-offset
//! sub-pixel peak decoding.

use crate::error::{Error, Result};
use crate::posenet::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decoded peak in heatmap-grid pixels (multiply by 4 for input pixels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Heatmap value at the integer argmax pixel.
    pub score: f64,
}

/// Quarter-offset decode of one channel: integer argmax (first index on
/// ties, row-major scan), then a 0.25 px shift per axis toward the
/// larger of the two axis neighbors; zero offset at boundaries and on
/// exact ties.
pub fn decode<S: Scalar>(heatmap: &Tensor<S>, n: usize, ch: usize) -> Result<Keypoint> {
    let s = heatmap.shape();
    if s.h < 3 || s.w < 3 {
        return Err(Error::precondition(
            "decode",
            format!("heatmap must be at least 3x3, got {}x{}", s.h, s.w),
        ));
    }
    let mut best = (0usize, 0usize);
    let mut best_v = heatmap.at(n, ch, 0, 0);
    for y in 0..s.h {
        for x in 0..s.w {
            let v = heatmap.at(n, ch, y, x);
            if v > best_v {
                best_v = v;
                best = (y, x);
            }
        }
    }
    let (py, px) = best;
    let offset = |lo: Option<S>, hi: Option<S>| -> f64 {
        match (lo, hi) {
            (Some(l), Some(h)) => {
                if h > l {
                    0.25
                } else if l > h {
                    -0.25
                } else {
                    0.0
                }
            }
            _ => 0.0, // boundary
        }
    };
    let dx = offset(
        (px > 0).then(|| heatmap.at(n, ch, py, px - 1)),
        (px + 1 < s.w).then(|| heatmap.at(n, ch, py, px + 1)),
    );
    let dy = offset(
        (py > 0).then(|| heatmap.at(n, ch, py - 1, px)),
        (py + 1 < s.h).then(|| heatmap.at(n, ch, py + 1, px)),
    );
    Ok(Keypoint {
        x: px as f64 + dx,
        y: py as f64 + dy,
        score: best_v.to_f64(),
    })
}

/// Decode every channel of every batch entry.
pub fn decode_all<S: Scalar>(heatmap: &Tensor<S>) -> Result<Vec<Vec<Keypoint>>> {
    let s = heatmap.shape();
    (0..s.n)
        .map(|n| (0..s.c).map(|ch| decode(heatmap, n, ch)).collect())
        .collect()
}

/// Swap paired channels (used to undo a horizontal flip's left/right
/// keypoint exchange).
pub fn swap_channels<S: Scalar>(t: &Tensor<S>, pairs: &[(usize, usize)]) -> Tensor<S> {
    let s = t.shape();
    let mut out = t.clone();
    let plane = s.h * s.w;
    for n in 0..s.n {
        for &(a, b) in pairs {
            for p in 0..plane {
                let ia = (n * s.c + a) * plane + p;
                let ib = (n * s.c + b) * plane + p;
                out.data_mut().swap(ia, ib);
            }
        }
    }
    out
}

fn check_pairs(pairs: &[(usize, usize)], channels: usize) -> Result<()> {
    let mut seen = vec![false; channels];
    for &(a, b) in pairs {
        if a >= channels || b >= channels {
            return Err(Error::precondition(
                "flip_average",
                format!("flip pair ({a},{b}) out of range for {channels} channels"),
            ));
        }
        if a == b || seen[a] || seen[b] {
            return Err(Error::precondition(
                "flip_average",
                format!("flip pairs must form an involution; ({a},{b}) repeats a channel"),
            ));
        }
        seen[a] = true;
        seen[b] = true;
    }
    Ok(())
}

/// Mean of the forward heatmap and the un-flipped heatmap of the
/// mirrored image: `(f(x) + unflip(f(hflip(x)))) / 2`.
pub fn flip_average(
    model: &Model<f32>,
    image: &Tensor<f32>,
    flip_pairs: &[(usize, usize)],
) -> Result<Tensor<f32>> {
    check_pairs(flip_pairs, model.config.num_keypoints)?;
    let (plain, _) = model.forward(image)?;
    let (flipped, _) = model.forward(&image.hflip())?;
    let restored = swap_channels(&flipped.hflip(), flip_pairs);
    let mut out = plain;
    for (o, v) in out.data_mut().iter_mut().zip(restored.data()) {
        *o = (*o + v) * 0.5;
    }
    Ok(out)
}
