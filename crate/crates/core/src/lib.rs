//! Dual-distribution discrepancy anomaly detection.
//!
//! Two ensembles of reconstruction autoencoders are trained in stage 1: one on known-normal
//! images only (NDM) and one on normal plus unlabeled images (UDM). The spread of the NDM
//! members (intra-discrepancy) and the gap between the two ensemble means (inter-discrepancy)
//! serve as pixel-wise anomaly scores. In stage 2 a small convolutional refinement network,
//! trained on synthetic anomalies, maps those raw score maps to refined anomaly probabilities.

pub mod asr;
pub mod blob;
pub mod data;
pub mod error;
pub mod eval;
pub mod nets;
pub mod nn;
pub mod pipeline;
pub mod scoring;
pub mod seed;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
