//! Triplet-based metric learning with anchor-point soft voting, plus an
//! iterative human-in-the-loop dataset bootstrapping engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`embednet`]: a small dense embedding network with exact reverse-mode
//!   gradients and L2-normalised output.
//! - [`triplet`]: the triplet hinge loss, hard-negative predicate and the
//!   local-positive / hard-negative triplet miner.
//! - [`anchors`]: K-means anchors, soft-voting confidences, classification
//!   and joint losses.
//! - [`trainer`]: the five training variants with quasi-online sampling.
//! - [`bootstrap`]: the round-based dataset bootstrapping state machine.
//! - [`data`]: synthetic data, dataset/checkpoint persistence and 2-D export.
//! - [`labelsvc`]: HTTP labeling service used by human labelers.

pub mod anchors;
pub mod bootstrap;
pub mod data;
pub mod embednet;
mod error;
pub mod labelsvc;
pub mod trainer;
pub mod triplet;
pub(crate) mod vecmath;

pub use error::{Error, Result};
