//! Core library for `crowdveil`: a desk-scale framework for crafting and
//! evaluating transferable, L∞-bounded adversarial perturbations against
//! localized crowd-counting models.
//!
//! The pieces fit together as follows:
//!
//! * [`data`] — synthetic crowd scenes (textured background + dark head
//!   blobs), ground-truth density rendering, and the on-disk dataset layout.
//! * [`tape`] — a small eager reverse-mode autodiff tape over `f64` ndarrays;
//!   everything differentiable in the crate runs through it.
//! * [`surrogate`] — toy density-map and point-regression crowd counters with
//!   a shared backbone, plus Grad-CAM attention extraction.
//! * [`generator`] — the 3-level encoder/decoder perturbation generator and
//!   the bounded application of δ to images.
//! * [`losses`] — confidence/peak suppression losses and the perceptual
//!   regularizers (hinge, total variation, frequency, attention guidance).
//! * [`training`] — the generator training loop: cosine learning rate,
//!   adaptive confidence threshold, structured logging, checkpoint/resume.
//! * [`metrics`] — counting error, miss rate, transfer ratio, SSIM/PSNR, and
//!   the cross-model transfer matrix.
//!
//! Determinism is a design requirement end to end: all randomness flows from
//! explicitly seeded, domain-separated ChaCha8 streams, reductions are
//! single-stream, and checkpoints round-trip parameters bit-exactly.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod surrogate;
pub mod tape;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
