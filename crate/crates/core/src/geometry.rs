//! Pinhole camera math, rigid transforms, pixel warping, and bilinear
//! sampling.
//!
//! Conventions: pixel centers sit at integer coordinates, image x points
//! right, image y points down, camera z points forward. Behind-camera and
//! out-of-bounds points are flagged invalid rather than clamped.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Field2, ImageRgb};

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Ray direction through pixel (u, v) at unit depth.
    #[inline]
    pub fn ray_dir(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// SE(3) camera-to-camera motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Max deviation from R'R = I plus |det - 1|; for validity checks.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation;
        let mut err: f64 = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let target = if r == c { 1.0 } else { 0.0 };
                err = err.max((gram[(r, c)] - target).abs());
            }
        }
        err.max((self.rotation.determinant() - 1.0).abs())
    }
}

/// Applies `b` then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

/// se(3) tangent vector: axis-angle rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            omega: Vector3::zeros(),
            v: Vector3::zeros(),
        }
    }

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist { omega, v }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Twist {
            omega: Vector3::new(a[0], a[1], a[2]),
            v: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Coefficients of the Rodrigues form R = I + a K + b K^2 and of the
/// translation mixer V = I + b K + c K^2, plus their theta-normalized
/// derivatives s_* = d{a,b,c}/dtheta / theta. Series below the threshold keep
/// everything smooth through theta = 0.
struct ExpCoeffs {
    a: f64,
    b: f64,
    c: f64,
    s_a: f64,
    s_b: f64,
    s_c: f64,
}

fn exp_coeffs(theta: f64) -> ExpCoeffs {
    let t2 = theta * theta;
    if theta < 0.1 {
        let t4 = t2 * t2;
        ExpCoeffs {
            a: 1.0 - t2 / 6.0 + t4 / 120.0,
            b: 0.5 - t2 / 24.0 + t4 / 720.0,
            c: 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            s_a: -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            s_b: -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
            s_c: -1.0 / 60.0 + t2 / 1260.0 - t4 / 60480.0,
        }
    } else {
        let (s, cth) = theta.sin_cos();
        let t3 = t2 * theta;
        let a = s / theta;
        let b = (1.0 - cth) / t2;
        let c = (theta - s) / t3;
        ExpCoeffs {
            a,
            b,
            c,
            s_a: (theta * cth - s) / t3,
            s_b: (theta * s - 2.0 * (1.0 - cth)) / (t2 * t2),
            s_c: ((1.0 - cth) * theta - 3.0 * (theta - s)) / (t2 * t3),
        }
    }
}

/// Rodrigues exponential map from a twist to a rigid transform.
pub fn se3_exp(t: &Twist) -> RigidTransform {
    let theta = t.omega.norm();
    let co = exp_coeffs(theta);
    let k = skew(&t.omega);
    let k2 = k * k;
    let rotation = Matrix3::identity() + k * co.a + k2 * co.b;
    let mixer = Matrix3::identity() + k * co.b + k2 * co.c;
    RigidTransform {
        rotation,
        translation: mixer * t.v,
    }
}

/// Pulls cotangents on the rotation matrix and translation of `se3_exp(t)`
/// back to the twist coordinates.
pub(crate) fn se3_exp_backward(
    t: &Twist,
    g_rotation: &Matrix3<f64>,
    g_translation: &Vector3<f64>,
) -> Twist {
    let theta = t.omega.norm();
    let co = exp_coeffs(theta);
    let k = skew(&t.omega);
    let k2 = k * k;
    let mixer = Matrix3::identity() + k * co.b + k2 * co.c;

    let g_v = mixer.transpose() * g_translation;
    let mut g_omega = Vector3::zeros();
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = 1.0;
        let ek = skew(&e);
        let mix = ek * k + k * ek;
        let w_i = t.omega[i];
        let d_rot = k * (co.s_a * w_i) + ek * co.a + k2 * (co.s_b * w_i) + mix * co.b;
        let d_mix = k * (co.s_b * w_i) + ek * co.b + k2 * (co.s_c * w_i) + mix * co.c;
        let mut acc = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                acc += g_rotation[(r, c)] * d_rot[(r, c)];
            }
        }
        g_omega[i] = acc + g_translation.dot(&(d_mix * t.v));
    }
    Twist {
        omega: g_omega,
        v: g_v,
    }
}

/// Adjoint action of a transform on a twist: `T exp(xi) T^-1 = exp(Adj(T) xi)`.
pub fn adjoint_apply(t: &RigidTransform, xi: &Twist) -> Twist {
    let r_omega = t.rotation * xi.omega;
    Twist {
        omega: r_omega,
        v: t.rotation * xi.v + t.translation.cross(&r_omega),
    }
}

/// Transpose of the adjoint, for pulling twist gradients back through a
/// change of reference frame.
pub fn adjoint_transpose_apply(t: &RigidTransform, g: &Twist) -> Twist {
    let rt = t.rotation.transpose();
    Twist {
        omega: rt * (g.omega - t.translation.cross(&g.v)),
        v: rt * g.v,
    }
}

/// Lifts a pixel at a given depth to a camera-frame 3D point.
pub fn backproject(pixel: Vector2<f64>, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "backproject needs positive depth, got {depth}"
        )));
    }
    Ok(k.ray_dir(pixel.x, pixel.y) * depth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Projects a camera-frame point to pixel coordinates. Points at or behind
/// the camera plane return `None` and are excluded from masks and losses.
pub fn project(point: &Vector3<f64>, k: &Intrinsics) -> Option<Projection> {
    if !(point.z > 0.0) {
        return None;
    }
    Some(Projection {
        pixel: Vector2::new(
            k.fx * point.x / point.z + k.cx,
            k.fy * point.y / point.z + k.cy,
        ),
        depth: point.z,
    })
}

/// One interpolated sample; `valid` is false whenever an interpolation corner
/// would fall outside the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleResult {
    pub value: f64,
    pub valid: bool,
}

impl SampleResult {
    pub fn invalid() -> Self {
        SampleResult {
            value: 0.0,
            valid: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTaps {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

impl BilinearTaps {
    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        [
            (1.0 - self.fx) * (1.0 - self.fy),
            self.fx * (1.0 - self.fy),
            (1.0 - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }

    #[inline]
    pub fn corners(&self) -> [(usize, usize); 4] {
        [
            (self.x0, self.y0),
            (self.x1, self.y0),
            (self.x0, self.y1),
            (self.x1, self.y1),
        ]
    }
}

/// Corner indices and fractions for bilinear interpolation at (x, y), or
/// `None` out of bounds. At an exact cell boundary the cell to the right is
/// used, which fixes the subgradient convention for coordinate derivatives.
pub(crate) fn bilinear_taps(width: usize, height: usize, x: f64, y: f64) -> Option<BilinearTaps> {
    if width == 0 || height == 0 {
        return None;
    }
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    // Reprojected border pixels land on the boundary only up to rounding;
    // snap coordinates within fp noise back inside.
    const SNAP: f64 = 1e-9;
    let x = if (-SNAP..0.0).contains(&x) {
        0.0
    } else if x > max_x && x <= max_x + SNAP {
        max_x
    } else {
        x
    };
    let y = if (-SNAP..0.0).contains(&y) {
        0.0
    } else if y > max_y && y <= max_y + SNAP {
        max_y
    } else {
        y
    };
    if !(x >= 0.0 && x <= max_x && y >= 0.0 && y <= max_y) {
        return None;
    }
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Some(BilinearTaps {
        x0,
        y0,
        x1,
        y1,
        fx: x - x0 as f64,
        fy: y - y0 as f64,
    })
}

/// Bilinear interpolation of a scalar grid at real-valued pixel coordinates.
pub fn bilinear_sample(grid: &Field2, x: f64, y: f64) -> SampleResult {
    match bilinear_taps(grid.width(), grid.height(), x, y) {
        None => SampleResult::invalid(),
        Some(t) => {
            let w = t.weights();
            let c = t.corners();
            let mut value = 0.0;
            for i in 0..4 {
                value += w[i] * grid.at(c[i].0, c[i].1);
            }
            SampleResult { value, valid: true }
        }
    }
}

/// Analytic spatial derivatives of `bilinear_sample` with respect to the
/// sample coordinates.
pub fn bilinear_sample_grad(grid: &Field2, x: f64, y: f64) -> Option<(f64, f64, f64)> {
    let t = bilinear_taps(grid.width(), grid.height(), x, y)?;
    let g00 = grid.at(t.x0, t.y0);
    let g10 = grid.at(t.x1, t.y0);
    let g01 = grid.at(t.x0, t.y1);
    let g11 = grid.at(t.x1, t.y1);
    let value = (1.0 - t.fx) * (1.0 - t.fy) * g00
        + t.fx * (1.0 - t.fy) * g10
        + (1.0 - t.fx) * t.fy * g01
        + t.fx * t.fy * g11;
    let dx = (1.0 - t.fy) * (g10 - g00) + t.fy * (g11 - g01);
    let dy = (1.0 - t.fx) * (g01 - g00) + t.fx * (g11 - g10);
    Some((value, dx, dy))
}

/// Bilinear interpolation of an RGB image; false when out of bounds.
pub fn bilinear_sample_rgb(img: &ImageRgb, x: f64, y: f64) -> ([f64; 3], bool) {
    match bilinear_taps(img.width(), img.height(), x, y) {
        None => ([0.0; 3], false),
        Some(t) => {
            let w = t.weights();
            let c = t.corners();
            let mut out = [0.0; 3];
            for i in 0..4 {
                let p = img.pixel(c[i].0, c[i].1);
                for ch in 0..3 {
                    out[ch] += w[i] * p[ch];
                }
            }
            (out, true)
        }
    }
}

/// Per-pixel correspondence from a target frame into a source frame.
#[derive(Debug, Clone)]
pub struct WarpField {
    pub width: usize,
    pub height: usize,
    /// Source-frame pixel coordinates per target pixel.
    pub coords: Vec<[f64; 2]>,
    /// Depth of the transformed point with respect to the source camera.
    pub src_depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl WarpField {
    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Backprojects every target pixel at its depth, moves it by `t_ts`, and
/// reprojects into the source frame. Validity is false for invalid or
/// non-positive depths, behind-camera points, and out-of-bounds landings.
pub fn warp_pixels(
    depth_t: &DepthMap,
    t_ts: &RigidTransform,
    k_t: &Intrinsics,
    k_s: &Intrinsics,
) -> WarpField {
    let (w, h) = (depth_t.width(), depth_t.height());
    let n = w * h;
    let mut field = WarpField {
        width: w,
        height: h,
        coords: vec![[0.0, 0.0]; n],
        src_depth: vec![0.0; n],
        valid: vec![false; n],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let z = depth_t.z.at(x, y);
            if !depth_t.valid[i] || !(z > 0.0) {
                continue;
            }
            let p = k_t.ray_dir(x as f64, y as f64) * z;
            let q = t_ts.transform(&p);
            let Some(proj) = project(&q, k_s) else {
                continue;
            };
            field.coords[i] = [proj.pixel.x, proj.pixel.y];
            field.src_depth[i] = proj.depth;
            // Valid exactly when the landing is bilinearly sampleable.
            field.valid[i] =
                bilinear_taps(k_s.width, k_s.height, proj.pixel.x, proj.pixel.y).is_some();
        }
    }
    field
}
