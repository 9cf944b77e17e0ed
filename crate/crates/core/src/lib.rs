//! Weighted test-time-augmentation (TTA) fusion for 3D PET/CT lesion
//! segmentation.
//!
//! A fixed, black-box predictor is run on several augmented copies of a
//! CT/PET pair. Each prediction is mapped back to the reference frame and
//! the maps are averaged with contribution coefficients ω constrained to
//! `Σ ω_i = n`. The coefficients are learned on validation cases by
//! [`coeffopt`].

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod coeffopt;
pub mod fusion;
pub mod metrics;
pub mod phantom;
pub mod error;
pub mod io;
pub mod predictor;
pub mod preprocess;
pub mod split;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{geometry_match, Geometry, MaskVolume, Volume3D};
