//! Robust explanation supervision for small convolutional classifiers.
//!
//! The crate trains a global-average-pooling CNN whose class activation map is
//! pushed toward noisy binary annotation masks through a slack hinge loss with
//! an adaptive binarization threshold. Everything here is pure computation and
//! builds without `std` (an allocator is required); file formats, image IO and
//! the command line live in the companion `res-cli` crate.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape.
//! - [`model`]: the backbone classifier and cross-entropy.
//! - [`saliency`]: CAM maps, max-normalisation, binarisation.
//! - [`imputation`]: Gaussian and learnable mask-to-target mappings.
//! - [`threshold`]: adaptive threshold search and its brute-force oracle.
//! - [`loss`]: robust explanation loss plus the L1 and BCE baselines.
//! - [`metrics`]: IoU, precision, recall and F1.
//! - [`data`]: samples, synthetic generation, annotation noise, splits.
//! - [`train`]: Adam and the alternating training loop.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod imputation;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod saliency;
pub mod tensor;
pub mod threshold;
pub mod train;

mod rng;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
