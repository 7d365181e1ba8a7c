//! Sparse-view 3D Gaussian splatting.
//!
//! The crate covers the numerical core of a sparse-view reconstruction and
//! editing pipeline:
//!
//! * [`geometry`]: cameras, quaternions, screen-space covariance projection
//! * [`gaussians`]: the Gaussian cloud, SH color, PLY storage
//! * [`raster`]: differentiable front-to-back splatting of color, alpha, depth
//! * [`hull`]: visual-hull carving from silhouettes and cloud initialization
//! * [`losses`]: L1, D-SSIM, mask BCE, depth and the weighted total
//! * [`optim`]: the training loop
//! * [`relevance`]: differential-noise relevance masks against a denoiser
//! * [`mesh`]: opacity field, marching cubes, smoothing, decimation
//! * [`dataset`], [`metrics`], [`pipeline`]: I/O, synthetic scenes, evaluation

pub mod config;
pub mod dataset;
pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod hull;
pub mod imaging;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod relevance;

pub use error::{Error, Result};
