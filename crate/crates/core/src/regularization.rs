//! Occlusion masking, brightness alignment, and the identity auto-mask.
//!
//! Masks are constants during differentiation: thresholding is
//! non-differentiable, so gradients never flow through mask construction.

use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, warp_pixels, Intrinsics, RigidTransform};
use crate::grid::{DepthMap, ImageRgb};
use crate::losses::photometric_error_map;

/// Per-pixel keep flag from the geometric consistency test: a pixel survives
/// when the depth of its transformed point agrees with the source depth map
/// sampled at its reprojection.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    pub m: Vec<bool>,
    pub width: usize,
    pub height: usize,
}

impl OcclusionMask {
    pub fn all_true(width: usize, height: usize) -> Self {
        OcclusionMask {
            m: vec![true; width * height],
            width,
            height,
        }
    }

    pub fn from_flags(width: usize, height: usize, m: Vec<bool>) -> Self {
        assert_eq!(m.len(), width * height);
        OcclusionMask { m, width, height }
    }

    pub fn count(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }
}

/// Auto-mask that drops pixels where the unwarped source already matches the
/// target better than the warped reconstruction does.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityMask {
    pub m: Vec<bool>,
    pub width: usize,
    pub height: usize,
}

impl IdentityMask {
    pub fn all_true(width: usize, height: usize) -> Self {
        IdentityMask {
            m: vec![true; width * height],
            width,
            height,
        }
    }

    pub fn count(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }
}

/// Global affine gain/bias aligning illumination between two frames, one set
/// per ordered frame pair and direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrightnessParams {
    pub a: f64,
    pub b: f64,
}

impl Default for BrightnessParams {
    fn default() -> Self {
        BrightnessParams { a: 1.0, b: 0.0 }
    }
}

/// Bilinear depth lookup that also requires all four corners valid.
fn sample_depth(depth: &DepthMap, x: f64, y: f64) -> Option<f64> {
    let taps = bilinear_taps(depth.width(), depth.height(), x, y)?;
    let w = taps.weights();
    let c = taps.corners();
    let mut value = 0.0;
    for i in 0..4 {
        let idx = c[i].1 * depth.width() + c[i].0;
        if !depth.valid[idx] {
            return None;
        }
        value += w[i] * depth.z.at(c[i].0, c[i].1);
    }
    Some(value)
}

/// Geometric occlusion test: each target pixel is lifted with `z_t`, moved
/// by `t_ts`, and kept when the source depth map sampled at its reprojection
/// agrees with the transformed point's depth within `gamma`. False wherever
/// the warp itself is invalid.
pub fn occlusion_mask(
    z_t: &DepthMap,
    z_s: &DepthMap,
    t_ts: &RigidTransform,
    k_t: &Intrinsics,
    k_s: &Intrinsics,
    gamma: f64,
) -> Result<OcclusionMask> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "occlusion threshold must be positive, got {gamma}"
        )));
    }
    let warp = warp_pixels(z_t, t_ts, k_t, k_s);
    let mut m = vec![false; warp.valid.len()];
    for i in 0..m.len() {
        if !warp.valid[i] {
            continue;
        }
        let Some(sampled) = sample_depth(z_s, warp.coords[i][0], warp.coords[i][1]) else {
            continue;
        };
        m[i] = (warp.src_depth[i] - sampled).abs() < gamma;
    }
    Ok(OcclusionMask {
        m,
        width: warp.width,
        height: warp.height,
    })
}

/// Affine brightness transform, unclamped so gradients pass through.
pub fn apply_brightness(img: &ImageRgb, p: &BrightnessParams) -> ImageRgb {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = p.a * *v + p.b;
    }
    out
}

/// Keeps a pixel only when the warped reconstruction beats the raw source
/// frame on the photometric error, strictly.
pub fn identity_mask(i_t: &ImageRgb, i_s: &ImageRgb, i_st: &ImageRgb) -> Result<IdentityMask> {
    if !i_t.same_shape(i_s) || !i_t.same_shape(i_st) {
        return Err(Error::InvalidArgument(
            "identity mask needs equally shaped images".into(),
        ));
    }
    let pe_warp = photometric_error_map(i_t, i_st);
    let pe_src = photometric_error_map(i_t, i_s);
    let m = pe_warp
        .data()
        .iter()
        .zip(pe_src.data().iter())
        .map(|(w, s)| w < s)
        .collect();
    Ok(IdentityMask {
        m,
        width: i_t.width(),
        height: i_t.height(),
    })
}
