//! Channel-wise mixed-precision quantization driven by Hessian-trace sensitivity.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`model`], [`engine`]: a small f64 reverse-mode engine for
//!   dense/conv nets with analytic Hessian-vector products (weights and
//!   activations), plus the desk-scale model zoo.
//! - [`train`], [`data`]: SGD training loop, synthetic datasets and IDX ingestion.
//! - [`trace`]: masked Hutchinson estimation of per-layer / per-channel average
//!   Hessian traces for weights and activations.
//! - [`quant`]: fake quantizers (symmetric uniform, SAWB 2-bit, PACT activations)
//!   with straight-through gradients, and per-channel policy application.
//! - [`alloc`]: global trace sort, ratio-to-bit-assignment, compression
//!   accounting and hard budget clamping.
//! - [`ddpg`]: actor-critic agent and the episodic ratio-search environment.
//! - [`pipeline`]: end-to-end orchestration (baseline training, the two-step
//!   activation-then-weight search, reports), [`plots`], [`checkpoint`],
//!   [`config`].

pub mod alloc;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ddpg;
pub mod engine;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod plots;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
