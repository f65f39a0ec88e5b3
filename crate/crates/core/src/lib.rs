//! Desk-scale laboratory for hierarchical imitation learning under
//! environmental stochasticity.
//!
//! The crate bundles a minimal reverse-mode autodiff tape, the Double Goal
//! environment with its scripted multimodal expert, type-conditioned policy
//! networks with adversarial and autoencoder training objectives, the exact
//! finite-world analysis of conditional type shift, and a batch CLI for
//! datasets, training runs, seed sweeps and theorem checks.

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod typeshift;

pub use error::{Error, Result};
