//! Random-bundle lesion segmentation ensembles.
//!
//! Each ensemble member is trained on the full image cohort with an
//! independent random subset of lesion annotations removed, using a loss
//! that upweights positives and bootstraps negatives from the network's
//! own predictions. Members are fused by averaging probabilities and the
//! result is scored with lesion-level detection metrics.

pub mod censor;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod harness;
pub mod morphology;
pub mod neural;
pub mod seeds;
pub mod synthgen;
pub mod volume;

pub use error::{Error, Result};
