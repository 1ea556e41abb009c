//! Frustum plane discretization and volume rendering.
//!
//! Density lives on K depth planes of the camera frustum. A ray through a
//! pixel accumulates transmittance `T_k = exp(-sum_{k'<k} sigma_k' delta_k')`
//! and deposits weight `w_k = T_k (1 - exp(-sigma_k delta_k))` on plane k.
//! Depth is the weight-sum of plane depths, color the weight-sum of plane
//! colors.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, BilinearTaps, Intrinsics, RigidTransform, SampleResult};
use crate::grid::{Field2, Field3};

pub use crate::grid::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneMode {
    /// One uniform draw per equal-width bin of the depth range.
    StratifiedRandom,
    /// Bin centers; deterministic.
    Midpoint,
}

/// Ascending frustum plane depths with their forward interval lengths. The
/// terminal interval runs to `z_max`, so it stays finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSet {
    depths: Vec<f64>,
    deltas: Vec<f64>,
    z_min: f64,
    z_max: f64,
}

impl PlaneSet {
    /// Rebuilds a plane set from explicit depths, recomputing the forward
    /// intervals.
    pub fn from_depths(depths: Vec<f64>, z_min: f64, z_max: f64) -> Result<Self> {
        if depths.is_empty() {
            return Err(Error::InvalidArgument("plane set needs depths".into()));
        }
        if !(z_min > 0.0 && z_min < z_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < z_min < z_max, got [{z_min}, {z_max}]"
            )));
        }
        if depths.windows(2).any(|w| w[0] >= w[1])
            || depths[0] < z_min
            || depths[depths.len() - 1] > z_max
        {
            return Err(Error::InvalidArgument(
                "plane depths must be strictly ascending inside [z_min, z_max]".into(),
            ));
        }
        let mut deltas = Vec::with_capacity(depths.len());
        for i in 0..depths.len() {
            let next = if i + 1 < depths.len() {
                depths[i + 1]
            } else {
                z_max
            };
            deltas.push(next - depths[i]);
        }
        if deltas.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidArgument(
                "plane intervals must be positive; the last plane must sit below z_max".into(),
            ));
        }
        Ok(PlaneSet {
            depths,
            deltas,
            z_min,
            z_max,
        })
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.depths.len()
    }

    #[inline]
    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    #[inline]
    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    #[inline]
    pub fn z_min(&self) -> f64 {
        self.z_min
    }

    #[inline]
    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    /// Piecewise-linear fractional plane index of a depth, clamped flat
    /// before the first and after the last plane. `None` outside the volume
    /// depth range. The second value is d(index)/dz, zero in clamped regions.
    pub fn fractional_index(&self, z: f64) -> Option<(f64, f64)> {
        if !(z >= self.z_min && z <= self.z_max) {
            return None;
        }
        let d = &self.depths;
        let last = d.len() - 1;
        if z <= d[0] {
            return Some((0.0, 0.0));
        }
        if z >= d[last] {
            return Some((last as f64, 0.0));
        }
        // d[j] <= z < d[j+1]
        let j = match d.partition_point(|&pd| pd <= z) {
            0 => 0,
            p => p - 1,
        };
        let span = d[j + 1] - d[j];
        Some(((j as f64) + (z - d[j]) / span, 1.0 / span))
    }
}

/// Discretizes `[z_min, z_max]` into K planes.
pub fn sample_planes(
    k: usize,
    z_min: f64,
    z_max: f64,
    mode: PlaneMode,
    rng: &mut impl Rng,
) -> Result<PlaneSet> {
    if k < 1 {
        return Err(Error::InvalidArgument("plane count must be >= 1".into()));
    }
    if !(z_min > 0.0 && z_min < z_max) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < z_min < z_max, got [{z_min}, {z_max}]"
        )));
    }
    let width = (z_max - z_min) / k as f64;
    let mut depths = Vec::with_capacity(k);
    for i in 0..k {
        let u = match mode {
            PlaneMode::Midpoint => 0.5,
            // Keep the draw strictly inside the open bin so depths stay
            // strictly ascending and deltas strictly positive.
            PlaneMode::StratifiedRandom => {
                let u: f64 = rng.random_range(0.0..1.0);
                1e-9 + u * (1.0 - 2e-9)
            }
        };
        depths.push(z_min + (i as f64 + u) * width);
    }
    let mut deltas = Vec::with_capacity(k);
    for i in 0..k {
        let next = if i + 1 < k { depths[i + 1] } else { z_max };
        deltas.push(next - depths[i]);
    }
    Ok(PlaneSet {
        depths,
        deltas,
        z_min,
        z_max,
    })
}

/// Deterministic midpoint plane set, the evaluation-time discretization.
pub fn midpoint_planes(k: usize, z_min: f64, z_max: f64) -> Result<PlaneSet> {
    struct NoRng;
    impl rand::RngCore for NoRng {
        fn next_u32(&mut self) -> u32 {
            unreachable!("midpoint sampling draws nothing")
        }
        fn next_u64(&mut self) -> u64 {
            unreachable!("midpoint sampling draws nothing")
        }
        fn fill_bytes(&mut self, _dest: &mut [u8]) {
            unreachable!("midpoint sampling draws nothing")
        }
    }
    sample_planes(k, z_min, z_max, PlaneMode::Midpoint, &mut NoRng)
}

/// Numerically stable softplus, `ln(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of softplus.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps unconstrained density parameters to nonnegative densities.
pub fn activate_density(raw: &Field3) -> Field3 {
    let mut out = raw.clone();
    for v in out.data_mut() {
        *v = softplus(*v);
    }
    out
}

/// Unconstrained density parameters on the planes of one camera frustum.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVolume {
    pub raw: Field3,
    pub planes: PlaneSet,
}

impl DensityVolume {
    pub fn new(raw: Field3, planes: PlaneSet) -> Self {
        assert_eq!(raw.planes(), planes.count());
        DensityVolume { raw, planes }
    }

    pub fn activated(&self) -> Field3 {
        activate_density(&self.raw)
    }
}

/// Per-pixel per-plane transmittance and rendering weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderWeights {
    pub transmittance: Field3,
    pub weights: Field3,
}

/// Transmittance and weight recurrence along one pixel ray.
pub(crate) fn weights_column(
    sigma: impl Fn(usize) -> f64,
    deltas: &[f64],
    t_out: &mut [f64],
    w_out: &mut [f64],
) {
    let mut optical_depth = 0.0_f64;
    for k in 0..deltas.len() {
        let t = (-optical_depth).exp();
        let o = sigma(k) * deltas[k];
        t_out[k] = t;
        w_out[k] = t * (-(-o).exp_m1());
        optical_depth += o;
    }
}

/// Pulls weight cotangents back to densities along one pixel ray.
/// `g_sigma` is accumulated, not overwritten.
pub(crate) fn weights_column_backward(
    sigma: impl Fn(usize) -> f64,
    deltas: &[f64],
    t: &[f64],
    w: &[f64],
    g_w: &[f64],
    mut add_g_sigma: impl FnMut(usize, f64),
) {
    let k_count = deltas.len();
    // d w_j / d o_k = -w_j for k < j, so each o_k sees the suffix sum of
    // g_w_j w_j beyond it.
    let mut suffix = 0.0;
    for k in (0..k_count).rev() {
        let o = sigma(k) * deltas[k];
        let direct = g_w[k] * t[k] * (-o).exp();
        add_g_sigma(k, deltas[k] * (direct - suffix));
        suffix += g_w[k] * w[k];
    }
}

/// Per-pixel transmittance and weights for a density grid.
pub fn compute_weights(sigma: &Field3, planes: &PlaneSet) -> RenderWeights {
    assert_eq!(sigma.planes(), planes.count());
    let (k_count, w, h) = (sigma.planes(), sigma.width(), sigma.height());
    let mut transmittance = Field3::zeros(k_count, w, h);
    let mut weights = Field3::zeros(k_count, w, h);
    let mut t_col = vec![0.0; k_count];
    let mut w_col = vec![0.0; k_count];
    for y in 0..h {
        for x in 0..w {
            weights_column(
                |k| sigma.at(k, x, y),
                planes.deltas(),
                &mut t_col,
                &mut w_col,
            );
            for k in 0..k_count {
                transmittance.set(k, x, y, t_col[k]);
                weights.set(k, x, y, w_col[k]);
            }
        }
    }
    RenderWeights {
        transmittance,
        weights,
    }
}

/// Depth as the weight-sum of plane depths. With `normalize` the sum is
/// divided by the total weight plus `eps`; the unnormalized form is the
/// default elsewhere in the crate.
pub fn render_depth_with(weights: &RenderWeights, planes: &PlaneSet, normalize: bool) -> DepthMap {
    const EPS: f64 = 1e-8;
    let w_field = &weights.weights;
    let (k_count, w, h) = (w_field.planes(), w_field.width(), w_field.height());
    let mut z = Field2::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..k_count {
                let wk = w_field.at(k, x, y);
                num += wk * planes.depths()[k];
                den += wk;
            }
            z.set(x, y, if normalize { num / (den + EPS) } else { num });
        }
    }
    DepthMap::all_valid(z)
}

pub fn render_depth(weights: &RenderWeights, planes: &PlaneSet) -> DepthMap {
    render_depth_with(weights, planes, false)
}

/// K x H x W x 3 per-plane colors.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorVolume {
    planes: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ColorVolume {
    pub fn filled(planes: usize, width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(planes * width * height * 3);
        for _ in 0..planes * width * height {
            data.extend_from_slice(&rgb);
        }
        ColorVolume {
            planes,
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, k: usize, x: usize, y: usize, c: usize) -> usize {
        debug_assert!(k < self.planes && x < self.width && y < self.height && c < 3);
        ((k * self.height + y) * self.width + x) * 3 + c
    }

    #[inline]
    pub fn at(&self, k: usize, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(k, x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(k, x, y, c);
        self.data[i] = v;
    }
}

/// Color as the weight-sum of plane colors.
pub fn render_color(weights: &RenderWeights, colors: &ColorVolume) -> crate::grid::ImageRgb {
    let w_field = &weights.weights;
    let (k_count, w, h) = (w_field.planes(), w_field.width(), w_field.height());
    assert_eq!(colors.planes, k_count);
    let mut out = crate::grid::ImageRgb::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.0; 3];
            for k in 0..k_count {
                let wk = w_field.at(k, x, y);
                for c in 0..3 {
                    px[c] += wk * colors.at(k, x, y, c);
                }
            }
            out.set_pixel(x, y, px);
        }
    }
    out
}

/// Sine/cosine positional embedding of a depth value normalized to [0, 1],
/// interleaved over frequencies `2^0 pi .. 2^(E/2-1) pi`.
pub fn embed_depth(z_norm: f64, e: usize) -> Result<Vec<f64>> {
    if e < 2 || e % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension must be even and >= 2, got {e}"
        )));
    }
    let mut out = Vec::with_capacity(e);
    for level in 0..e / 2 {
        let freq = (1u64 << level) as f64 * std::f64::consts::PI;
        let (s, c) = (freq * z_norm).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Embeddings of every plane depth of a set, normalized by its `z_max`.
pub fn embed_plane_depths(planes: &PlaneSet, e: usize) -> Result<Vec<Vec<f64>>> {
    planes
        .depths()
        .iter()
        .map(|&z| embed_depth(z / planes.z_max(), e))
        .collect()
}

/// Taps for one trilinear density query: a bilinear pixel footprint on two
/// neighboring planes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct QueryTaps {
    pub bt: BilinearTaps,
    pub j0: usize,
    pub j1: usize,
    pub fz: f64,
}

pub(crate) fn density_query_taps(
    planes: &PlaneSet,
    k_s: &Intrinsics,
    grid_w: usize,
    grid_h: usize,
    p: &Vector3<f64>,
) -> Option<QueryTaps> {
    if !(p.z > 0.0) {
        return None;
    }
    let u = k_s.fx * p.x / p.z + k_s.cx;
    let v = k_s.fy * p.y / p.z + k_s.cy;
    let bt = bilinear_taps(grid_w, grid_h, u, v)?;
    let (index, _) = planes.fractional_index(p.z)?;
    let j0 = index.floor() as usize;
    let j1 = (j0 + 1).min(planes.count() - 1);
    Some(QueryTaps {
        bt,
        j0,
        j1,
        fz: index - j0 as f64,
    })
}

pub(crate) fn query_sigma_with_taps(sigma: &Field3, taps: &QueryTaps) -> f64 {
    let bw = taps.bt.weights();
    let corners = taps.bt.corners();
    let mut lo = 0.0;
    let mut hi = 0.0;
    for i in 0..4 {
        lo += bw[i] * sigma.at(taps.j0, corners[i].0, corners[i].1);
        hi += bw[i] * sigma.at(taps.j1, corners[i].0, corners[i].1);
    }
    (1.0 - taps.fz) * lo + taps.fz * hi
}

/// Trilinear density lookup of source-frame points: each point projects to a
/// source pixel footprint and a fractional plane index against the source
/// plane depths. Invalid outside the frustum or the volume depth range.
pub fn query_density(
    source: &DensityVolume,
    k_s: &Intrinsics,
    points: &[Vector3<f64>],
) -> Vec<SampleResult> {
    let sigma = source.activated();
    points
        .iter()
        .map(|p| {
            match density_query_taps(&source.planes, k_s, sigma.width(), sigma.height(), p) {
                None => SampleResult::invalid(),
                Some(taps) => SampleResult {
                    value: query_sigma_with_taps(&sigma, &taps),
                    valid: true,
                },
            }
        })
        .collect()
}

/// Renders the target-frame depth from the source frame's density volume:
/// points at the target plane depths along each target ray are moved by
/// `t_ts`, the source density is queried there, and the target-frame
/// depths/intervals integrate the result. A pixel is valid only if every
/// sampled point is.
pub fn render_cross_depth(
    target_planes: &PlaneSet,
    source: &DensityVolume,
    t_ts: &RigidTransform,
    k_t: &Intrinsics,
    k_s: &Intrinsics,
) -> DepthMap {
    let sigma = source.activated();
    let (w, h) = (k_t.width, k_t.height);
    let k_count = target_planes.count();
    let mut out = DepthMap::invalid(w, h);
    let mut sig_col = vec![0.0; k_count];
    let mut t_col = vec![0.0; k_count];
    let mut w_col = vec![0.0; k_count];
    for y in 0..h {
        'pixel: for x in 0..w {
            let dir = k_t.ray_dir(x as f64, y as f64);
            for (k, z) in target_planes.depths().iter().enumerate() {
                let p = t_ts.transform(&(dir * *z));
                match density_query_taps(&source.planes, k_s, sigma.width(), sigma.height(), &p) {
                    None => continue 'pixel,
                    Some(taps) => sig_col[k] = query_sigma_with_taps(&sigma, &taps),
                }
            }
            weights_column(|k| sig_col[k], target_planes.deltas(), &mut t_col, &mut w_col);
            let mut z = 0.0;
            for k in 0..k_count {
                z += w_col[k] * target_planes.depths()[k];
            }
            let i = y * w + x;
            out.z.data_mut()[i] = z;
            out.valid[i] = true;
        }
    }
    out
}
