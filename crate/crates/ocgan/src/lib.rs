//! One-class novelty detection with a latent-space-constrained adversarial
//! autoencoder.
//!
//! The library trains a denoising autoencoder whose bounded latent space
//! (`tanh` encoder output, support `(-1,1)^d`) is shaped by two adversaries —
//! a latent discriminator matching encodings to `U(-1,1)^d` and a visual
//! discriminator matching decoded random samples to real images — plus a
//! classifier that guides gradient-ascent mining of informative-negative
//! latent samples. Test images are scored by reconstruction MSE; scores are
//! summarised as ROC/AUC.
//!
//! Everything is seeded and CPU-only: two runs with the same configuration
//! produce byte-identical checkpoints, score files, and image grids.
//!
//! Module map:
//! - [`datasets`]: IDX ingestion, protocol splits, noise injection, batching
//! - [`nn`]: tensors-by-name parameter store, layers with hand-written
//!   forward/backward passes, Adam
//! - [`model`]: the five networks and their latent geometry
//! - [`training`]: the four-phase adversarial training loop with mining
//! - [`eval`]: novelty scoring, ROC/AUC, protocol and ablation runners
//! - [`checkpoint`]: binary tensor snapshot format
//! - [`pgm`]: grayscale image grids for diagnostics

// Force the BLAS backend to be linked in.
extern crate blas_src;

pub mod checkpoint;
pub mod datasets;
pub mod eval;
pub mod jsonio;
pub mod model;
pub mod nn;
pub mod pgm;
pub mod rng;
pub mod training;

mod num;

pub use num::Real;
