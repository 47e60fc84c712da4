//! Count-conditioned PET denoising at desk scale: synthetic phantom
//! simulation, binomial count thinning, prompt-embedding gates on a U-Net
//! backbone, seeded training, SSIM/PSNR evaluation, and report generation.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod condunet;
pub mod config;
pub mod countsim;
pub mod embedder;
pub mod error;
pub mod metrics;
pub mod phantom;
pub mod ptf;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
