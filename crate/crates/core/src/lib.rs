//! Semi-supervised domain adaptation with a prototypical cosine head trained
//! by alternating minimization and maximization of the unlabeled-target
//! entropy.
//!
//! The crate is organized along the pipeline:
//!
//! - [`imaging`]: canonicalization to a fixed square frame and augmentation.
//! - [`datasets`]: manifests, K-shot episodes, balanced batches, and a
//!   synthetic two-domain corpus.
//! - [`model`]: the encoder contract, a small reference CNN, and the head.
//! - [`objectives`]: cross-entropy, unlabeled entropy, their minimax
//!   combinations, analytic gradients and a finite-difference checker.
//! - [`training`]: the alternating Adam loop, learning-rate schedule and
//!   checkpoints.
//! - [`evaluation`]: confusion matrices, accuracy, scenario sweeps and
//!   ablations.

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod model;
pub mod objectives;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
