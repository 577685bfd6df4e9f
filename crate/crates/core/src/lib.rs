//! Gaussian splatting with a learned, one-shot pruning mask.
//!
//! The crate contains a differentiable CPU rasterizer for 3D Gaussians,
//! per-Gaussian importance scores, a Gumbel-Sigmoid pruning mask (plus
//! straight-through and hard-threshold baselines), a training loop with
//! adaptive density control, synthetic data generation, PLY interop and
//! evaluation metrics.

pub mod data;
pub mod error;
pub mod importance;
pub mod masking;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod sh;
pub mod train;

pub use error::{Error, Result};
pub use scene::{Camera, Gaussian, GaussianCloud, Image, ParamGroup};
