//! Multi-resolution keypoint-estimation network with resolution-wise
//! attention fusion and a gradual pyramid refinement head, built on a
//! minimal rank-4 tensor autodiff tape.
//!
//! The crate covers the full desk-scale pipeline: network construction
//! and forward passes, MSE heatmap training with cosine-annealed warm
//! restarts, synthetic articulated-figure data with augmentation,
//! flip-averaged inference, quarter-offset sub-pixel decoding, and
//! OKS-based average-precision evaluation.

pub mod checkpoint;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gpr;
pub mod gradcheck;
pub mod params;
pub mod posenet;
pub mod pyramid;
pub mod ram;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{softmax_vec, Scalar};
pub use tape::{Tape, ValueId};
pub use tensor::{Shape, Tensor};
