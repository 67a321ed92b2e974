//! Generative random-walk deviation loss for zero-shot feature generation.
//!
//! The crate is layered bottom-up:
//!
//! - [`grad`]: dense matrices and a reverse-mode tape.
//! - [`walk`]: similarity graph, transition matrices, landing
//!   probabilities and the deviation / attraction / visit losses.
//! - [`model`]: conditional generator, two-headed critic, feature
//!   extractor and class centers.
//! - [`train`]: adversarial training with gradient penalty and the
//!   pluggable deviation term.
//! - [`data`]: synthetic benchmarks and the three-CSV bundle format.
//! - [`eval`]: nearest-neighbour evaluation, Top-1, seen-unseen curve.

// Tape ops return Result, so they cannot be the std operator traits.
#![allow(clippy::should_implement_trait)]

pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod model;
pub mod rng;
pub mod train;
pub mod walk;

pub use error::{Error, Result};
pub use grad::Matrix;
