//! A from-scratch micro-stack for semantic segmentation experiments.
//!
//! The crate builds three encoder–decoder networks — a plain U-net, a
//! batch-normalized residual variant, and the same residual body trained with
//! a feedback-weighted cross-entropy loss — on top of a minimal reverse-mode
//! autodiff tape. Everything runs on dense double-precision CPU tensors at
//! desk scale: small images, small channel counts, exact gradient checks.
//!
//! Modules:
//! - [`tensor`]: tensors, the autodiff tape, and the layer operations
//!   (convolution, pooling, batch norm, dropout, softmax).
//! - [`network`]: network construction, forward passes, serialization.
//! - [`loss`]: feedback-weighted and uniform cross-entropy.
//! - [`metrics`]: Dice scores and paired t-tests for method comparison.
//! - [`data`]: synthetic nested-ellipse dataset generation and PGM/CSV io.
//! - [`training`]: Adam, the training loop, and evaluation runs.
//! - [`cli`]: the `key=value` run configuration and the five subcommands.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
