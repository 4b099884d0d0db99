//! Synchronous image-label diffusion for lesion segmentation.
//!
//! The engine trains a single denoiser on image/label pairs that are
//! corrupted by a *shared* noise draw per step, so the label stream stays
//! aligned with the image stream throughout the forward process.  At
//! inference time a truncated reverse chain (or one of three cheaper
//! estimators built on it) turns an image into a lesion probability map.
//!
//! Modules mirror the pipeline: [`schedule`] fixes the noise schedule,
//! [`diffusion`] implements the forward/posterior algebra, [`denoiser`]
//! holds the two-head U-Net, [`losses`] the composite training objective,
//! [`trainer`] the optimization loop, [`sampler`] the reverse-time
//! estimators, [`data`] synthetic datasets and on-disk formats,
//! [`metrics`] evaluation, and [`cli`] the command-line front end.

pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod real;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;

/// Version string embedded in checkpoints, manifests, and reports.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
