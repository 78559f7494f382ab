//! Human motion generation, prediction and completion in pose space.
//!
//! The pipeline has two stages. A conditional single-pose generator is
//! trained with a gradient-penalized Wasserstein objective, then a
//! recurrent sequence generator learns to walk its latent space. Prediction
//! and completion invert the stacked generator under frame constraints with
//! L-BFGS-B and finish with temporal Poisson blending. A small U-Net maps
//! joint heat maps plus a reference image to pixels.

pub mod numerics;

pub mod checkpoint;
pub mod evalscore;
pub mod inverter;
pub mod nn;
pub mod pose_gan;
pub mod posecore;
pub mod seq_gan;
pub mod skel2img;
pub mod synthdata;

mod error;
pub mod rng;

pub use error::{Error, Result};
