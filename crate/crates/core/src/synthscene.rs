//! Procedural RGB-D frame pairs with exact ground truth.
//!
//! Scenes are piecewise-analytic (planes, spheres), so depth, pose, and
//! visibility are exact rather than rasterized approximations. The world
//! frame coincides with the target camera frame.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, se3_exp, Intrinsics, RigidTransform, Twist};
use crate::grid::{DepthMap, Field2, ImageRgb};
use crate::regularization::{BrightnessParams, OcclusionMask};

#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    /// Fronto-parallel plane at a fixed depth.
    SinglePlane { depth: f64 },
    /// Infinite far plane plus a rectangular near occluder. The rectangle is
    /// given in world units on the near plane as [x0, x1, y0, y1], closed.
    TwoPlaneOccluder {
        near_depth: f64,
        far_depth: f64,
        rect: [f64; 4],
    },
    /// Fronto-parallel steps: step `i` covers view-ray ratios x/z in
    /// [edges[i-1], edges[i]) at depth `depths[i]`, outer steps extending to
    /// infinity, with a backdrop plane at the deepest step so off-axis rays
    /// cannot slip between steps. `edges.len() == depths.len() - 1`.
    Staircase {
        depths: Vec<f64>,
        edges: Vec<f64>,
    },
    /// Spheres in front of an infinite background plane.
    SphereField {
        spheres: Vec<([f64; 3], f64)>,
        background_depth: f64,
    },
}

impl Layout {
    fn depth_extent(&self) -> (f64, f64) {
        match self {
            Layout::SinglePlane { depth } => (*depth, *depth),
            Layout::TwoPlaneOccluder {
                near_depth,
                far_depth,
                ..
            } => (*near_depth, *far_depth),
            Layout::Staircase { depths, .. } => {
                let lo = depths.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
            Layout::SphereField {
                spheres,
                background_depth,
            } => {
                let lo = spheres
                    .iter()
                    .map(|(c, r)| c[2] - r)
                    .fold(*background_depth, f64::min);
                (lo, *background_depth)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    Checker { scale: f64 },
    ValueNoise { scale: f64 },
    Stripes { scale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub layout: Layout,
    pub texture: Texture,
    /// Volume depth bounds the scene surfaces must fall inside.
    pub depth_range: (f64, f64),
    /// Magnitude caps of the camera motion between the two frames.
    pub rotation_mag: f64,
    pub translation_mag: f64,
    /// Gain and bias applied to the source frame's intensities.
    pub illumination: (f64, f64),
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(
            self.width as f64,
            self.width as f64,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
        .expect("generator intrinsics are valid by construction")
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::DegenerateScene(format!(
                "image size {}x{} below the 16x16 minimum",
                self.width, self.height
            )));
        }
        let (z_min, z_max) = self.depth_range;
        if !(z_min > 0.0 && z_min < z_max) {
            return Err(Error::DegenerateScene(format!(
                "depth range [{z_min}, {z_max}] must be positive and ordered"
            )));
        }
        let (lo, hi) = self.layout.depth_extent();
        if lo < z_min || hi > z_max {
            return Err(Error::DegenerateScene(format!(
                "layout depths [{lo}, {hi}] outside volume range [{z_min}, {z_max}]"
            )));
        }
        if !(self.rotation_mag >= 0.0 && self.translation_mag >= 0.0) {
            return Err(Error::DegenerateScene("negative pose magnitude".into()));
        }
        if let Layout::Staircase { depths, edges } = &self.layout {
            if depths.len() < 2 || edges.len() + 1 != depths.len() {
                return Err(Error::DegenerateScene(
                    "staircase needs depths.len() == edges.len() + 1 >= 2".into(),
                ));
            }
            if edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::DegenerateScene(
                    "staircase edges must be ascending".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A frame pair with whatever ground truth is available. Generated pairs
/// carry everything; ingested pairs may miss depth, pose, or brightness.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub i_t: ImageRgb,
    pub i_s: ImageRgb,
    pub intrinsics: Intrinsics,
    pub gt_depth_t: Option<DepthMap>,
    pub gt_depth_s: Option<DepthMap>,
    /// Motion taking target-frame coordinates to source-frame coordinates.
    pub gt_t_ts: Option<RigidTransform>,
    /// Correcting transform: applying it to the warped source reproduces the
    /// target intensities.
    pub gt_brightness: Option<BrightnessParams>,
    /// Synthetic provenance, kept for exact ray-cast oracles.
    pub scene: Option<SceneSpec>,
}

impl FramePair {
    pub fn width(&self) -> usize {
        self.i_t.width()
    }

    pub fn height(&self) -> usize {
        self.i_t.height()
    }

    /// The same pair with the frame roles exchanged: pose inverted and the
    /// brightness correction re-derived for the opposite direction. The
    /// scene provenance is dropped because its world frame is the original
    /// target frame.
    pub fn swapped(&self) -> FramePair {
        FramePair {
            i_t: self.i_s.clone(),
            i_s: self.i_t.clone(),
            intrinsics: self.intrinsics,
            gt_depth_t: self.gt_depth_s.clone(),
            gt_depth_s: self.gt_depth_t.clone(),
            gt_t_ts: self.gt_t_ts.as_ref().map(|t| t.inverse()),
            gt_brightness: self.gt_brightness.map(|b| BrightnessParams {
                a: 1.0 / b.a,
                b: -b.b / b.a,
            }),
            scene: None,
        }
    }
}

/// Smallest ray parameter s > eps with `origin + s * dir` on a scene surface.
pub(crate) fn cast_ray(
    layout: &Layout,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    const S_MIN: f64 = 1e-12;
    let plane_hit = |depth: f64| -> Option<(f64, Vector3<f64>)> {
        if dir.z.abs() < 1e-15 {
            return None;
        }
        let s = (depth - origin.z) / dir.z;
        if s <= S_MIN {
            return None;
        }
        Some((s, origin + dir * s))
    };
    match layout {
        Layout::SinglePlane { depth } => plane_hit(*depth),
        Layout::TwoPlaneOccluder {
            near_depth,
            far_depth,
            rect,
        } => {
            let near = plane_hit(*near_depth).filter(|(_, p)| {
                p.x >= rect[0] && p.x <= rect[1] && p.y >= rect[2] && p.y <= rect[3]
            });
            match (near, plane_hit(*far_depth)) {
                (Some(a), Some(b)) => Some(if a.0 <= b.0 { a } else { b }),
                (Some(a), None) => Some(a),
                (None, b) => b,
            }
        }
        Layout::Staircase { depths, edges } => {
            let backdrop = depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut best = plane_hit(backdrop);
            for (i, depth) in depths.iter().enumerate() {
                let Some((s, p)) = plane_hit(*depth) else {
                    continue;
                };
                let ratio = p.x / p.z;
                let lo = if i == 0 { f64::NEG_INFINITY } else { edges[i - 1] };
                let hi = if i + 1 == depths.len() {
                    f64::INFINITY
                } else {
                    edges[i]
                };
                if ratio >= lo && ratio < hi && best.as_ref().is_none_or(|b| s < b.0) {
                    best = Some((s, p));
                }
            }
            best
        }
        Layout::SphereField {
            spheres,
            background_depth,
        } => {
            let mut best = plane_hit(*background_depth);
            for (c, r) in spheres {
                let center = Vector3::new(c[0], c[1], c[2]);
                let oc = origin - center;
                let a = dir.dot(dir);
                let b = 2.0 * oc.dot(dir);
                let cc = oc.dot(&oc) - r * r;
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    continue;
                }
                let sq = disc.sqrt();
                for s in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                    if s > S_MIN && best.as_ref().is_none_or(|bst| s < bst.0) {
                        best = Some((s, origin + dir * s));
                    }
                }
            }
            best
        }
    }
}

fn hash01(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = (ix as u64)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((iy as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(seed.wrapping_mul(0x94d0_49bb_1331_11eb));
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn albedo(texture: &Texture, seed: u64, p: &Vector3<f64>) -> [f64; 3] {
    match texture {
        Texture::Checker { scale } => {
            // Soft checker: bounded curvature keeps bilinear resampling of
            // the rendered images within the stated tolerance.
            let w = 0.5
                + 0.5
                    * (std::f64::consts::PI * p.x / scale).sin()
                    * (std::f64::consts::PI * p.y / scale).sin();
            let c0 = [0.2, 0.25, 0.3];
            let c1 = [0.75, 0.7, 0.65];
            [
                c0[0] + (c1[0] - c0[0]) * w,
                c0[1] + (c1[1] - c0[1]) * w,
                c0[2] + (c1[2] - c0[2]) * w,
            ]
        }
        Texture::Stripes { scale } => {
            let t = 0.5 + 0.35 * (2.0 * std::f64::consts::PI * p.x / scale).sin();
            [t, 0.9 * t + 0.05, 0.8 * t + 0.1]
        }
        Texture::ValueNoise { scale } => {
            let gx = p.x / scale;
            let gy = p.y / scale;
            let ix = gx.floor();
            let iy = gy.floor();
            // Smoothstep fade keeps the field C1 across lattice cells.
            let fade = |t: f64| t * t * (3.0 - 2.0 * t);
            let (fx, fy) = (fade(gx - ix), fade(gy - iy));
            let (ix, iy) = (ix as i64, iy as i64);
            let v = (1.0 - fx) * (1.0 - fy) * hash01(ix, iy, seed)
                + fx * (1.0 - fy) * hash01(ix + 1, iy, seed)
                + (1.0 - fx) * fy * hash01(ix, iy + 1, seed)
                + fx * fy * hash01(ix + 1, iy + 1, seed);
            [
                0.2 + 0.65 * v,
                0.3 + 0.4 * v,
                0.65 - 0.45 * v,
            ]
        }
    }
}

fn mean_gradient_energy(img: &ImageRgb) -> f64 {
    let (w, h) = (img.width(), img.height());
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                if x + 1 < w {
                    let d = img.at(x + 1, y, c) - img.at(x, y, c);
                    acc += d * d;
                    n += 1;
                }
                if y + 1 < h {
                    let d = img.at(x, y + 1, c) - img.at(x, y, c);
                    acc += d * d;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

const MIN_TEXTURE_ENERGY: f64 = 1e-4;

/// Renders one camera: per-pixel ray cast, Lambertian texture lookup, depth
/// as the hit's z in that camera's frame. `cam_to_world` moves camera-frame
/// rays into the world frame, `world_to_cam` measures depth.
fn render_view(
    spec: &SceneSpec,
    k: &Intrinsics,
    cam_to_world: &RigidTransform,
    world_to_cam: &RigidTransform,
) -> Result<(ImageRgb, DepthMap)> {
    let (w, h) = (k.width, k.height);
    let mut img = ImageRgb::zeros(w, h);
    let mut depth = Field2::zeros(w, h);
    let origin = cam_to_world.translation;
    for y in 0..h {
        for x in 0..w {
            let dir = cam_to_world.rotation * k.ray_dir(x as f64, y as f64);
            let Some((_, hit)) = cast_ray(&spec.layout, &origin, &dir) else {
                return Err(Error::DegenerateScene(format!(
                    "ray through pixel ({x}, {y}) escapes the scene"
                )));
            };
            img.set_pixel(x, y, albedo(&spec.texture, spec.seed, &hit));
            depth.set(x, y, world_to_cam.transform(&hit).z);
        }
    }
    Ok((img, DepthMap::all_valid(depth)))
}

/// Generates a target/source pair with exact depth, pose, brightness, and
/// deterministic output per seed. The camera motion is drawn from the
/// spec's magnitude caps.
pub fn generate_pair(spec: &SceneSpec) -> Result<FramePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = |rng: &mut ChaCha8Rng| -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 {
                return v / n;
            }
        }
    };
    let omega = unit(&mut rng) * (spec.rotation_mag * rng.random_range(0.5..1.0));
    let v = unit(&mut rng) * (spec.translation_mag * rng.random_range(0.5..1.0));
    generate_pair_with_pose(spec, &se3_exp(&Twist::new(omega, v)))
}

/// Same as [`generate_pair`] but with the camera motion given exactly
/// instead of drawn, for oracle constructions that need a specific pose.
pub fn generate_pair_with_pose(spec: &SceneSpec, t_ts: &RigidTransform) -> Result<FramePair> {
    spec.validate()?;
    let k = spec.intrinsics();
    let t_ts = *t_ts;
    let t_st = t_ts.inverse();

    let identity = RigidTransform::identity();
    let (i_t, gt_depth_t) = render_view(spec, &k, &identity, &identity)?;
    let (mut i_s, gt_depth_s) = render_view(spec, &k, &t_st, &t_ts)?;

    if mean_gradient_energy(&i_t) < MIN_TEXTURE_ENERGY {
        return Err(Error::DegenerateScene(
            "texture below the minimum gradient-energy threshold; photometric \
             losses would be uninformative"
                .into(),
        ));
    }

    let (gain, bias) = spec.illumination;
    for v in i_s.data_mut() {
        *v = gain * *v + bias;
    }
    for v in i_s.data() {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::DegenerateScene(format!(
                "illumination ({gain}, {bias}) pushes source intensities to {v}, outside [0, 1]"
            )));
        }
    }

    Ok(FramePair {
        i_t,
        i_s,
        intrinsics: k,
        gt_depth_t: Some(gt_depth_t),
        gt_depth_s: Some(gt_depth_s),
        gt_t_ts: Some(t_ts),
        gt_brightness: Some(BrightnessParams {
            a: 1.0 / gain,
            b: -bias / gain,
        }),
        scene: Some(spec.clone()),
    })
}

/// Exact visibility mask: a target surface point is kept when it projects
/// inside the source image and the first surface the source camera sees
/// along that ray is the point itself.
pub fn gt_occlusion(pair: &FramePair) -> Result<OcclusionMask> {
    let spec = pair.scene.as_ref().ok_or_else(|| {
        Error::InvalidArgument("ground-truth occlusion needs a synthetic pair".into())
    })?;
    let depth_t = pair
        .gt_depth_t
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("pair carries no ground-truth depth".into()))?;
    let t_ts = pair
        .gt_t_ts
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("pair carries no ground-truth pose".into()))?;
    let k = &pair.intrinsics;
    let (w, h) = (k.width, k.height);
    let source_origin = t_ts.inverse().translation;
    let mut m = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth_t.valid[i] {
                continue;
            }
            let p_w = k.ray_dir(x as f64, y as f64) * depth_t.z.at(x, y);
            let p_s = t_ts.transform(&p_w);
            if !(p_s.z > 0.0) {
                continue;
            }
            let u = k.fx * p_s.x / p_s.z + k.cx;
            let v = k.fy * p_s.y / p_s.z + k.cy;
            if bilinear_taps(w, h, u, v).is_none() {
                continue;
            }
            // Parameterize so the point sits at s = 1; anything hit earlier
            // occludes it.
            let dir = p_w - source_origin;
            let Some((s_hit, _)) = cast_ray(&spec.layout, &source_origin, &dir) else {
                continue;
            };
            m[i] = s_hit >= 1.0 - 1e-9;
        }
    }
    Ok(OcclusionMask { m, width: w, height: h })
}
