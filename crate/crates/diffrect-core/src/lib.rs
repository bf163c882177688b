//! Semi-supervised segmentation with diffusion-based pseudo-label
//! rectification.
//!
//! The pipeline trains a segmentation U-Net on a partially labeled dataset
//! with weak/strong consistency, then improves the pseudo labels themselves:
//! masks are painted into a color space (`scs`), embedded into a compact
//! latent together with a quality score τ (`nets`, `metrics`), and a
//! conditional latent diffusion model (`schedule`, `nets`) learns to
//! transport coarse label latents toward fine ones. Sampling that diffusion
//! model at training time yields rectified labels that supervise the
//! segmentation net; inference uses the segmentation net alone.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nets;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod scs;
pub mod trainer;

pub use error::{Error, Result};
pub use mask::LabelMask;
pub use scs::{ColorSet, SemanticLabel};

/// Latent embedding of a colored mask, channel-first `[256, H/16, W/16]` at
/// the default configuration.
pub type LatentFeature = ndarray::Array3<f64>;
