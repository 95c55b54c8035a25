//! Sparse 3D voxel computation and a two-stage, class-aware point-cloud detector.
//!
//! The crate is layered bottom-up:
//!
//! - [`sparse`]: hashed sparse tensors, kernel maps and sparse convolution.
//! - [`voxel`]: point-cloud quantization with average pooling.
//! - [`geometry`]: oriented boxes, containment and rotated IoU.
//! - [`autograd`] and [`nn`]: a small reverse-mode tape, parameters and AdamW.
//! - [`backbone`], [`proposal`], [`roipool`], [`losses`]: the detector.
//! - [`pipeline`]: configuration, scene I/O, synthetic data, training,
//!   inference, checkpoints and evaluation.

pub mod error;
pub mod matrix;
pub mod real;
pub mod sparse;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use real::Real;
pub mod autograd;
pub mod backbone;
pub mod dual;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod proposal;
pub mod roipool;
pub mod voxel;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/sparse.md")]
    mod sparse {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/detector.md")]
    mod detector {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
