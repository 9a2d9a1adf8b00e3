//! Meta-statistical learning toolkit.
//!
//! Learns statistical estimators by supervised training of permutation-invariant
//! set encoders on synthetic meta-datasets, and evaluates them against classical
//! estimators under frequentist criteria (bias, variance, power, calibration),
//! including out-of-meta-distribution generalization.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`ndtensor`]: dense-tensor reverse-mode autodiff with Adam and clipping
//! - [`setenc`]: permutation-invariant dataset encoders and prediction heads
//! - [`metagen`]: meta-prior sampling, dataset synthesis, ground-truth labels
//! - [`losses`]: MSE / MVUE / Gaussian-NLL / BCE / Neyman-Pearson objectives
//! - [`train`]: batching, optimization loop, checkpointing, validation selection
//! - [`classical`]: baseline normality tests and mutual-information estimators
//! - [`evalharness`]: frequentist evaluation grids, metrics and report emission

pub mod error;
pub mod metagen;
pub mod setenc;
pub mod ndtensor;
pub mod rngstream;
pub mod stats;

pub use error::{Error, Result};
