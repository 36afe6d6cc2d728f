//! Landmark-guided window cross-attention for facial expression recognition,
//! desk scale.
//!
//! The crate provides, from the ground up:
//!
//! - a minimal dense f64 tensor with reverse-mode gradient accumulation and a
//!   finite-difference oracle ([`tensor`]),
//! - the attention kernels: multi-head self-attention, vanilla multi-head
//!   cross-attention, and window-based multi-head cross-attention with a
//!   per-head relative position bias ([`attention`]),
//! - transformer building blocks including the one-stream and two-stream
//!   cross-fusion encoders and stochastic depth ([`blocks`]),
//! - the full model: toy multi-scale convolutional backbones for the image
//!   and (frozen) landmark streams, per-scale cross-fusion, token-dimension
//!   merge, a small integration transformer, and a classification head
//!   ([`model`]),
//! - analytic cost formulas with an instrumented multiply-accumulate counter
//!   as ground truth, plus an empirical scaling benchmark ([`complexity`]),
//! - a synthetic-data training harness (Adam, exponential learning-rate
//!   decay, flip/erase augmentation) and class-wise evaluation reports
//!   ([`train`], [`eval`], [`data`]),
//! - binary checkpoints and PGM/PPM image IO ([`checkpoint`], [`pgm`]).
//!
//! All forward computation is deterministic given seeds. With the `parallel`
//! feature (default) the inner matrix products use rayon data parallelism;
//! results are bit-identical to the sequential fallback.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod parallel;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Tape, Tensor};
