//! Sign-activation autoencoders on sparse data.
//!
//! Training (straight-through SGD and alternating GD-min), exact and
//! Monte-Carlo MSE evaluation, one-step state-evolution theory, Bayes
//! denoisers and VAMP state evolution, plus the experiment harness behind the
//! `aelab` binary.

pub mod amp;
pub mod denoisers;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod models;
pub mod priors;
pub mod quadrature;
pub mod rng;
pub mod special;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use linalg::{EncoderMatrix, Mask, Matrix, Provenance};
pub use priors::{Prior, PriorFamily};
pub use rng::SeedSpec;
