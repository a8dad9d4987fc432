//! Meta test-time training at desk scale.
//!
//! A self-contained stack for training an image classifier whose parameters
//! are adapted at inference time, per single unlabeled test image, by one
//! self-supervised gradient step:
//!
//! - [`graph`]: reverse-mode autodiff with gradients that are themselves
//!   differentiable (the meta-gradient flows through the inner update);
//! - [`nn`]: group-normalized residual feature extractor plus classifier,
//!   projector and predictor heads over a shared representation;
//! - [`augment`]: the per-sample pair augmentation and the per-task batch
//!   augmentation, both replayable from stored parameters;
//! - [`losses`]: the normalized-distance pair loss, cross-entropy, and the
//!   weighted total objective;
//! - [`trainers`]: meta-training, joint training with an EMA target, and the
//!   plain cross-entropy baseline;
//! - [`adapt`]: per-image test-time adaptation and dataset-level evaluation;
//! - [`data`]: CIFAR-10 binary and NPY ingestion, a synthetic dataset
//!   generator, and parametric corruption kernels;
//! - [`checkpoint`] / [`config`]: reproducible run plumbing;
//! - [`verify`]: the numeric oracle suite (finite differences, loss
//!   properties, normalization statistics, format round-trips).

pub mod adapt;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainers;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{GradientMap, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
