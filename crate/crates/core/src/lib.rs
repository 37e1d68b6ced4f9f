//! Small-lesion detection in volumetric images.
//!
//! Two stages: scale-normalized Laplacian-of-Gaussian candidate selection
//! tuned under a sensitivity floor, then a compact 3D CNN that scores a cubic
//! crop around each candidate. Evaluation is FROC under patient-wise k-fold
//! cross-validation, exercised on synthetic phantom cohorts.

#![allow(clippy::needless_range_loop)]

pub mod augment;
mod avx;
pub mod cli;
pub mod cropnet;
pub mod detect_eval;
pub mod error;
pub mod par;
pub mod phantom;
pub mod rng;
pub mod scalespace;
mod simd;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
