//! Counterfactual visual interpretation of binary image classifiers through a
//! disentangled, classifier-aligned latent space.
//!
//! The pipeline has four stages: [`dataset`] preprocessing and splits, a frozen
//! binary [`classifier`], the generative [`model`] trained against that
//! classifier, and post-hoc [`interpret`]ation (feature ranking, latent
//! traversal and SSIM alteration maps).

pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod hashing;
pub mod image;
pub mod interpret;
pub mod model;
pub mod nn;

pub use error::{Error, Result};
pub use image::ProcessedImage;
