//! Unpaired infrared-to-visible video translation.
//!
//! Two generators translate frames between an infrared domain `X` and a
//! visible domain `Y`. Two temporal predictors forecast the third frame of a
//! triplet from the first two, and two PatchGAN discriminators score realness.
//! Training combines adversarial, perceptual cyclic (cycle, recurrent,
//! recycle), patchwise contrastive (external similarity) and motion-degree
//! (internal similarity) losses.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod params;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
