//! Differentiable channel pruning driven by per-layer retention chains.
//!
//! The crate trains channel gates jointly with network weights under a
//! FLOPs budget and extracts discrete pruned structures afterwards:
//!
//! - [`tensor`] / [`tape`]: dense f64 tensors and define-by-run reverse-mode
//!   differentiation for the handful of ops the networks need.
//! - [`gate`]: per-layer architecture parameters and the retention chain.
//! - [`budget`]: expected-channel / expected-FLOPs accounting and losses.
//! - [`net`]: declarative network specs, validation, and the full / fused /
//!   sliced forward builders over shared weights.
//! - [`train`]: warmup plus alternating weight and architecture updates.
//! - [`sample`]: direct and expected sampling, FLOPs analyses, export.
//! - [`data`]: deterministic synthetic dataset and image-folder loading.
//! - [`config`] / [`checkpoint`] / [`cli`]: run configuration and commands.

pub mod budget;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gate;
pub mod net;
pub mod sample;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
