//! Simulation and reconstruction toolkit for compressive double-pixel
//! correlation imaging of spatially entangled photon pairs.
//!
//! The pipeline runs
//!
//! 1. [`model`]: discretized position or momentum joint distributions of a
//!    double-Gaussian biphoton,
//! 2. [`sensing`]: random binary mask pairs and the matrix-free Kronecker
//!    sensing operator,
//! 3. [`measure`]: Poisson photon-counting measurements and raster-scan
//!    baselines,
//! 4. [`recon`]: nonnegative ℓ1-regularized least squares by gradient
//!    projection,
//! 5. [`analysis`]: mutual information, thresholding, double-Gaussian fits
//!    and the entropic EPR-steering test.

pub mod analysis;
pub mod error;
pub mod measure;
pub mod model;
pub mod nelder_mead;
pub mod recon;
pub mod rng;
pub mod sensing;

pub use error::{Error, Result};
