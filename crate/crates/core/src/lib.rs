//! Cycle-consistent semantic segmentation with noise injection in the latent
//! segmentation space.
//!
//! The forward cycle maps an image to class logits with the segmentation generator,
//! perturbs the logits (max-only masking, uniform quantization or additive Gaussian
//! noise) and reconstructs the image with the reconstruction generator. The backward
//! cycle renders the ground-truth mask into an image, segments it again and is
//! supervised adversarially by a patch discriminator fed from an image pool.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod pool;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
