//! Deep combinatorial aggregation (DCA) for uncertainty-aware classification.
//!
//! The crate trains combinatorially recombined instances of residual-MLP
//! components, collapses fine-grain banks into an averaged model (DCWA),
//! supports a consistency enforcing loss, and ships the full evaluation
//! harness: calibration, distributional shift, OOD detection, and prediction
//! diversity, with standard training and deep ensembles as baselines.

pub mod bank;
pub mod checkpoint;
pub mod data;
pub mod dcwa;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{DcaError, Result};
