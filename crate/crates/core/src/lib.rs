//! Enhanced multi-head attention in a small trainable Transformer encoder.
//!
//! The attention layer pairs every query head with several key heads
//! (many-to-many mapping), producing up to `M²` maps that are reduced back
//! to `M` by grouped convolutions (inner-subspace interaction) and mixed by
//! ordinary convolutions (cross-subspace interaction). Everything runs on a
//! small reverse-mode autodiff engine in `f64`.
//!
//! Module map:
//! - [`ndtensor`]: tensors, tape-based autodiff, finite-difference oracle
//! - [`attention`]: classical and many-to-many attention, masking, aggregation
//! - [`interaction`]: ISI / CSI / fused interaction stages and parameter counts
//! - [`model`]: encoder assembly, parameter store, checkpoints
//! - [`metrics`]: head similarity, token correlation, localness, utilization
//! - [`harness`]: synthetic tasks, training, evaluation, pruning, analysis, CLI

pub mod attention;
pub mod error;
pub mod harness;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod ndtensor;
pub mod rng;

pub use error::{Error, Result};
