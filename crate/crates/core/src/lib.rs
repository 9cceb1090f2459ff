//! Geometric core of a confidence-weighted RGB-only dense SLAM backend.
//!
//! - [`geometry`]: SE(3), pinhole cameras, pixel grids, Umeyama alignment.
//! - [`tracking`]: keyframe factor graph, damped Gauss-Newton bundle
//!   adjustment and prior-regularized depth/scale/shift refinement.
//! - [`fusion`]: multi-view consistency counts and proxy-depth fusion.
//! - [`gsmap`]: Gaussian-splat map, renderer, loss and deformation.
//! - [`backend`]: loop closure, normalization and global bundle adjustment.
//! - [`quality`]: PSNR and SSIM (with gradient).

pub mod backend;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gsmap;
pub mod quality;
pub mod tracking;

pub use error::{Error, Result};
