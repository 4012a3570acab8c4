//! Semi-supervised semantic segmentation at desk scale.
//!
//! A teacher trained on a labeled subset produces hard pseudo labels for the
//! unlabeled images using multi-scale and flip test-time augmentation. A
//! student is then trained on both, with randomly sampled strong
//! photometric augmentation on the pseudo-labeled half, separate
//! batch-normalization statistics for that half, and a confidence-weighted
//! self-correction loss. Students are promoted to teachers for further rounds.

pub mod augment;
pub mod datahub;
pub mod error;
pub mod losses;
pub mod model;
pub mod normalization;
pub mod numerics;
pub mod pipeline;
pub mod pseudolabel;
pub mod seeding;

pub use error::{Error, Result};
