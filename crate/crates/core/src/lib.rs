//! Differentiable density-volume depth engine.
//!
//! A camera frustum is discretized into depth planes carrying occlusion
//! probability density. Depth maps are rendered by integrating transmittance
//! along pixel rays, images are reconstructed by warping an adjacent frame
//! through the rendered depth and a rigid motion, and every stage carries
//! hand-written adjoints so per-frame density grids, a 6-DoF pose, and
//! brightness parameters can be fitted by direct gradient descent.

pub mod difftape;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod regularization;
pub mod rendering;
pub mod synthscene;

pub use error::{Error, Result};
