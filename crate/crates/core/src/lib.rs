//! Core library of the EncodeNet workbench.
//!
//! The crate is organized around the stages of the training framework:
//!
//! - [`tensor`], [`tape`], [`optim`] — dense f32/f64 tensors, reverse-mode
//!   automatic differentiation on an explicit tape, and the SGD/Adam
//!   optimizers used by every training loop.
//! - [`model`] — the declarative layer-list model IR: parsing, shape
//!   inference, splitting a baseline into feature extractor and classifier
//!   head, and synthesizing the mirrored decoder of a converting autoencoder.
//! - [`exec`] — parameter storage, initialization, and spec-driven forward
//!   execution on the tape.
//! - [`data`] — IDX / CIFAR binary loaders, the synthetic desk-scale dataset,
//!   subsampling, and batch iteration.
//! - [`train`] — seeded training loops for classification and reconstruction
//!   objectives, metric capture, and checkpointing.
//! - [`cluster`] — feature embedding and per-class k-means with elbow-based
//!   selection of the cluster count.
//! - [`entropy`] — prediction-entropy scoring, representative selection, and
//!   conversion-pair construction.
//! - [`pipeline`] — the staged end-to-end runs and the ablation matrix.

pub mod check;
pub mod cluster;
pub mod data;
pub mod entropy;
pub mod error;
pub mod exec;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
