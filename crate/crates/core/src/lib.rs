//! Gradient-guided suggestive annotation for image segmentation.
//!
//! A VAE learns a latent manifold over the unannotated pool. A segmenter
//! trained on a random initial subset supplies input-space loss gradients;
//! perturbed images are projected onto the manifold and matched to real pool
//! samples with an angular-constrained nearest-neighbour search.

pub mod autodiff;
mod codec;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod sampling;

pub use error::{Error, Result};
