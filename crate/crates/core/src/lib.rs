//! Desk-scale laboratory for cross-domain novel class discovery.
//!
//! The crate bundles a small reverse-mode tensor engine, the content and
//! style networks, the contrastive, self-distillation and style-removal
//! objectives, procedural cross-domain datasets, clustering metrics, a
//! k-NN support-overlap estimator and the multi-seed training harness.

pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod seed;
pub mod separability;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
