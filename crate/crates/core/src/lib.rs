//! Few-shot supervised domain adaptation with a stochastic-neighbourhood
//! embedding loss.
//!
//! A feature extractor maps source and target images into a shared latent
//! space. For each labeled target sample the loss pulls the farthest
//! same-class source embedding in and pushes the nearest different-class
//! source embedding out, alongside per-domain cross-entropy. An optional
//! mean-teacher phase then exploits unlabeled target images.

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod mean_teacher;
pub mod net;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
