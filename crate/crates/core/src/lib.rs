//! Attribute-guided part detection and refinement for person
//! re-identification.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors and a reverse-mode differentiation graph.
//! - [`dataset`]: the synthetic AttrGrid generator, manifests and P×K sampling.
//! - [`model`]: the two-stream network with attribute-part detectors and
//!   gated part refinement.
//! - [`objective`]: identity, attribute and batch-hard triplet losses.
//! - [`training`]: SGD with momentum, the staged schedule, checkpoints.
//! - [`evaluation`]: CMC/mAP, k-reciprocal re-ranking, mask IoU, reports.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
