//! Adversarial-robustness toolkit for small image classifiers.
//!
//! The crate bundles a small reverse-mode differentiation engine for
//! layer stacks ([`nn`]), dataset ingestion ([`data`]), the training-time
//! defenses ([`defense`]: label smoothing, logit squeezing, Gaussian noise
//! augmentation and adversarial training), ℓ∞ attacks ([`attack`]), the
//! linearized robustness analysis ([`analytics`]) and loss-surface probes
//! ([`landscape`]).
//!
//! All arithmetic is done in `f64`. Pixel values live on the `[0, 1]` scale
//! everywhere inside the crate; conversion from 0–255 units happens at the
//! command-line boundary.

pub mod analytics;
pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod landscape;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
