//! Multi-angle feature aggregation (MAFA) and contour-supervised training for
//! binary instrument segmentation, small enough to train on a laptop CPU.
//!
//! The crate is organized around a handful of subsystems:
//!
//! - [`geometry`] — rotation and alignment of raster maps (lossless
//!   quarter-turn and bilinear arbitrary-angle modes).
//! - [`nn`] — a minimal differentiable layer set (conv, depthwise-separable
//!   conv, batchnorm, relu, softmax pairs, bilinear resize, dropout) with
//!   analytic gradients, plus the Adam optimizer and lr schedule.
//! - [`mafa`] — the rotate / encode / align / aggregate block and its
//!   ablation variants (max-out, placement, multi-angle ensemble).
//! - [`contour`] — contour ground-truth extraction and the dual loss
//!   (Dice on the contour head + cross-entropy on the segmentation head).
//! - [`model`] — a scaled-down DeepLabv3+-style encoder-decoder with a
//!   4-channel seg+contour head, assembled from `nn` layers.
//! - [`metrics`] — DSC, IOU, rotational IOU statistics, near-boundary IOU,
//!   and dataset-level summaries.
//! - [`data`] — synthetic scene generation, PNG dataset I/O, training-time
//!   augmentation and subset-wise K-fold splitting.
//! - [`train`] / [`report`] — the end-to-end training loop and the
//!   evaluation / rotation-audit / ablation drivers behind the CLI.
//!
//! See the `examples/` directory for one runnable program per capability,
//! and the `mafa-seg` binary for the batch entry points.

pub mod checkpoint;
pub mod config;
pub mod contour;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod mafa;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Angle, BinaryMask, RasterMap, RotationMode};
pub use tensor::Tensor4;
