//! Self-supervised stereo depth estimation at desk scale.
//!
//! The crate provides a small reverse-mode tensor library, a rectified
//! stereo camera model with a differentiable reprojection warp, a siamese
//! convolutional encoder with windowed epipolar cross-attention, a
//! multi-scale disparity decoder, the photometric self-supervision
//! objective, depth/disparity evaluation metrics with statistical model
//! comparison, and an analytic FLOP counter for the attention layers.

pub mod tensor;

pub use tensor::{Dtype, Element, Parameter, Tensor, TensorError};
