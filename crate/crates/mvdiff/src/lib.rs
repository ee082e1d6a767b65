//! Desk-scale multi-view driving video diffusion.
//!
//! A self-contained stack for generating short surround-view driving clips:
//! a reverse-mode autodiff substrate, explicit camera-ray conditioning in a
//! unified coordinate frame, a DiT-style denoiser with temporal and
//! cross-view attention behind learnable gates, a four-task masked
//! rectified-flow objective trained in three stages, and a classifier-free
//! guided Euler sampler with autoregressive rollout. Training data comes
//! from a built-in deterministic driving-world simulator, so the whole
//! pipeline runs and verifies on one CPU.

pub mod conditioning;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evalx;
pub mod geometry;
pub mod scenesim;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
