//! The four training loss terms and their weighted total.

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Field2, ImageRgb};
use crate::regularization::{BrightnessParams, IdentityMask, OcclusionMask};

/// Standard SSIM stabilizers on [0, 1] intensities.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Depths below this are treated as invalid in the smoothness term.
pub(crate) const MIN_DEPTH: f64 = 1e-9;

/// Guard on the denominator of the depth-consistency ratio.
pub(crate) const CONSISTENCY_EPS: f64 = 1e-6;

/// Balance weights of the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1e-3,
            beta: 2e-3,
            eta: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("eta", self.eta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The four loss terms (unweighted) and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub smoothness: f64,
    pub depth_consistency: f64,
    pub brightness_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        LossBreakdown {
            photometric: 0.0,
            smoothness: 0.0,
            depth_consistency: 0.0,
            brightness_reg: 0.0,
            total: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.photometric.is_finite()
            && self.smoothness.is_finite()
            && self.depth_consistency.is_finite()
            && self.brightness_reg.is_finite()
            && self.total.is_finite()
    }

    /// Element-wise sum, used when accumulating both pair directions.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.photometric += other.photometric;
        self.smoothness += other.smoothness;
        self.depth_consistency += other.depth_consistency;
        self.brightness_reg += other.brightness_reg;
        self.total += other.total;
    }
}

/// Weighted sum of the four terms.
pub fn total_loss(
    photometric: f64,
    smoothness: f64,
    depth_consistency: f64,
    brightness_reg: f64,
    w: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        photometric,
        smoothness,
        depth_consistency,
        brightness_reg,
        total: photometric
            + w.alpha * smoothness
            + w.beta * depth_consistency
            + w.eta * brightness_reg,
    }
}

#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * (n - 1) - i as usize
    } else {
        i as usize
    }
}

/// 3x3 mean pooling with reflection padding.
pub(crate) fn box3_reflect(src: &Field2) -> Field2 {
    let (w, h) = (src.width(), src.height());
    let mut out = Field2::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1..=1_isize {
                let yy = reflect_index(y as isize + dy, h);
                for dx in -1..=1_isize {
                    let xx = reflect_index(x as isize + dx, w);
                    acc += src.at(xx, yy);
                }
            }
            out.set(x, y, acc / 9.0);
        }
    }
    out
}

/// Adjoint of `box3_reflect`: scatters each output cotangent back over its
/// nine taps.
pub(crate) fn box3_reflect_adjoint(g: &Field2) -> Field2 {
    let (w, h) = (g.width(), g.height());
    let mut out = Field2::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = g.at(x, y) / 9.0;
            for dy in -1..=1_isize {
                let yy = reflect_index(y as isize + dy, h);
                for dx in -1..=1_isize {
                    let xx = reflect_index(x as isize + dx, w);
                    out.add(xx, yy, v);
                }
            }
        }
    }
    out
}

/// Local-statistics maps of one channel pair, shared by the SSIM forward and
/// backward passes.
pub(crate) struct SsimChannel {
    pub mu_x: Field2,
    pub mu_y: Field2,
    pub m_xx: Field2,
    pub m_yy: Field2,
    pub m_xy: Field2,
}

pub(crate) fn ssim_channel_stats(x: &Field2, y: &Field2) -> SsimChannel {
    let (w, h) = (x.width(), x.height());
    let mut xx = Field2::zeros(w, h);
    let mut yy = Field2::zeros(w, h);
    let mut xy = Field2::zeros(w, h);
    for i in 0..x.len() {
        xx.data_mut()[i] = x.data()[i] * x.data()[i];
        yy.data_mut()[i] = y.data()[i] * y.data()[i];
        xy.data_mut()[i] = x.data()[i] * y.data()[i];
    }
    SsimChannel {
        mu_x: box3_reflect(x),
        mu_y: box3_reflect(y),
        m_xx: box3_reflect(&xx),
        m_yy: box3_reflect(&yy),
        m_xy: box3_reflect(&xy),
    }
}

#[inline]
pub(crate) fn ssim_from_stats(s: &SsimChannel, i: usize, c1: f64, c2: f64) -> f64 {
    let mu_x = s.mu_x.data()[i];
    let mu_y = s.mu_y.data()[i];
    let var_x = s.m_xx.data()[i] - mu_x * mu_x;
    let var_y = s.m_yy.data()[i] - mu_y * mu_y;
    let cov = s.m_xy.data()[i] - mu_x * mu_y;
    let a1 = 2.0 * mu_x * mu_y + c1;
    let a2 = 2.0 * cov + c2;
    let b1 = mu_x * mu_x + mu_y * mu_y + c1;
    let b2 = var_x + var_y + c2;
    (a1 * a2) / (b1 * b2)
}

/// Per-pixel structural similarity of two images (channel mean), computed
/// with 3x3 mean pooling and reflection padding.
pub fn ssim_map(a: &ImageRgb, b: &ImageRgb, c1: f64, c2: f64) -> Field2 {
    assert!(a.same_shape(b));
    let (w, h) = (a.width(), a.height());
    let mut out = Field2::zeros(w, h);
    for c in 0..3 {
        let stats = ssim_channel_stats(&a.channel(c), &b.channel(c));
        for i in 0..out.len() {
            out.data_mut()[i] += ssim_from_stats(&stats, i, c1, c2) / 3.0;
        }
    }
    out
}

/// Per-pixel photometric error, the same L1 + SSIM combination the
/// photometric loss integrates.
pub(crate) fn photometric_error_map(a: &ImageRgb, b: &ImageRgb) -> Field2 {
    let (w, h) = (a.width(), a.height());
    let ssim = ssim_map(a, b, SSIM_C1, SSIM_C2);
    let mut out = Field2::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let pa = a.pixel(x, y);
            let pb = b.pixel(x, y);
            let l1 = ((pa[0] - pb[0]).abs() + (pa[1] - pb[1]).abs() + (pa[2] - pb[2]).abs()) / 3.0;
            out.set(x, y, 0.15 * l1 + 0.85 * (1.0 - ssim.at(x, y)) / 2.0);
        }
    }
    out
}

/// Photometric loss value together with the masked pixel count; an empty
/// mask yields zero and is reported through the count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricLoss {
    pub value: f64,
    pub masked_pixels: usize,
}

impl PhotometricLoss {
    pub fn empty_mask(&self) -> bool {
        self.masked_pixels == 0
    }
}

pub(crate) fn masked_image(img: &ImageRgb, mask: &[bool]) -> ImageRgb {
    let mut out = img.clone();
    for (i, keep) in mask.iter().enumerate() {
        if !keep {
            for c in 0..3 {
                out.data_mut()[i * 3 + c] = 0.0;
            }
        }
    }
    out
}

/// Masked L1 + SSIM photometric loss between the target image and the
/// brightness-aligned warped reconstruction. Means run over masked pixels
/// only, so the magnitude does not depend on mask sparsity.
pub fn photometric_loss(
    i_t: &ImageRgb,
    i_st_ab: &ImageRgb,
    m_o: &OcclusionMask,
    m_i: &IdentityMask,
) -> PhotometricLoss {
    assert!(i_t.same_shape(i_st_ab));
    let n = i_t.width() * i_t.height();
    assert_eq!(m_o.m.len(), n);
    assert_eq!(m_i.m.len(), n);
    let mask: Vec<bool> = (0..n).map(|i| m_o.m[i] && m_i.m[i]).collect();
    let masked = mask.iter().filter(|&&b| b).count();
    if masked == 0 {
        return PhotometricLoss {
            value: 0.0,
            masked_pixels: 0,
        };
    }
    let mx = masked_image(i_t, &mask);
    let my = masked_image(i_st_ab, &mask);
    let ssim = ssim_map(&mx, &my, SSIM_C1, SSIM_C2);
    let mut l1_sum = 0.0;
    let mut ssim_sum = 0.0;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let mut l1 = 0.0;
        for c in 0..3 {
            l1 += (mx.data()[i * 3 + c] - my.data()[i * 3 + c]).abs();
        }
        l1_sum += l1 / 3.0;
        ssim_sum += (1.0 - ssim.data()[i]) / 2.0;
    }
    PhotometricLoss {
        value: 0.15 * l1_sum / masked as f64 + 0.85 * ssim_sum / masked as f64,
        masked_pixels: masked,
    }
}

/// What the smoothness penalty is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothnessTarget {
    /// Mean-normalized inverse depth (the conventional choice).
    MeanNormalizedDisparity,
    /// Mean-normalized depth, the literal alternative.
    MeanNormalizedDepth,
}

/// Edge-aware first-order smoothness with forward differences. Each axis is
/// averaged over its own valid pairs; image gradients are channel means.
pub fn smoothness_loss(z_t: &DepthMap, i_t: &ImageRgb, target: SmoothnessTarget) -> f64 {
    let (w, h) = (z_t.width(), z_t.height());
    assert_eq!(i_t.width(), w);
    assert_eq!(i_t.height(), h);
    let n = w * h;
    let mut d = vec![0.0; n];
    let mut valid = vec![false; n];
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let z = z_t.z.data()[i];
        if z_t.valid[i] && z > MIN_DEPTH {
            d[i] = match target {
                SmoothnessTarget::MeanNormalizedDisparity => 1.0 / z,
                SmoothnessTarget::MeanNormalizedDepth => z,
            };
            valid[i] = true;
            sum += d[i];
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    let mean = sum / count as f64;
    if !(mean > 0.0) {
        return 0.0;
    }

    let mut sum_x = 0.0;
    let mut n_x = 0usize;
    let mut sum_y = 0.0;
    let mut n_y = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !valid[i] {
                continue;
            }
            if x + 1 < w && valid[i + 1] {
                let grad = image_forward_grad(i_t, x, y, x + 1, y);
                sum_x += ((d[i + 1] - d[i]) / mean).abs() * (-grad).exp();
                n_x += 1;
            }
            if y + 1 < h && valid[i + w] {
                let grad = image_forward_grad(i_t, x, y, x, y + 1);
                sum_y += ((d[i + w] - d[i]) / mean).abs() * (-grad).exp();
                n_y += 1;
            }
        }
    }
    let mx = if n_x > 0 { sum_x / n_x as f64 } else { 0.0 };
    let my = if n_y > 0 { sum_y / n_y as f64 } else { 0.0 };
    mx + my
}

#[inline]
fn image_forward_grad(img: &ImageRgb, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
    let a = img.pixel(x0, y0);
    let b = img.pixel(x1, y1);
    ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0
}

/// Depth-consistency loss value and the number of counted pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub counted: usize,
}

impl ConsistencyLoss {
    pub fn empty_mask(&self) -> bool {
        self.counted == 0
    }
}

/// Symmetric relative difference between the cross-rendered and directly
/// rendered target depths, averaged over pixels that are masked, valid in
/// both maps, and have a usable denominator.
pub fn depth_consistency_loss(
    z_st: &DepthMap,
    z_t: &DepthMap,
    m_o: &OcclusionMask,
) -> ConsistencyLoss {
    assert_eq!(z_st.width(), z_t.width());
    assert_eq!(z_st.height(), z_t.height());
    let n = z_t.z.len();
    assert_eq!(m_o.m.len(), n);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for i in 0..n {
        if !m_o.m[i] || !z_st.valid[i] || !z_t.valid[i] {
            continue;
        }
        let u = z_st.z.data()[i];
        let v = z_t.z.data()[i];
        if u + v <= CONSISTENCY_EPS {
            continue;
        }
        sum += (u - v).abs() / (u + v);
        counted += 1;
    }
    ConsistencyLoss {
        value: if counted > 0 {
            sum / counted as f64
        } else {
            0.0
        },
        counted,
    }
}

/// Quadratic prior pulling the brightness transform toward identity.
pub fn brightness_reg_loss(p: &BrightnessParams) -> f64 {
    (p.a - 1.0) * (p.a - 1.0) + p.b * p.b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Field2;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageRgb {
        let mut img = ImageRgb::zeros(w, h);
        for v in img.data_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn ssim_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 8, 6);
        let s = ssim_map(&a, &a, SSIM_C1, SSIM_C2);
        for v in s.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = ImageRgb::filled(7, 5, [0.0; 3]);
        let b = ImageRgb::filled(7, 5, [1.0; 3]);
        let c1 = 1e-4;
        let s = ssim_map(&a, &b, c1, SSIM_C2);
        // Variances vanish, so S = (2 mu_x mu_y + c1) / (mu_x^2 + mu_y^2 + c1).
        let want = c1 / (1.0 + c1);
        for v in s.data() {
            assert!((v - want).abs() < 1e-12);
        }
    }

    /// Direct windowed SSIM, reimplemented with explicit loops.
    fn ssim_oracle(a: &ImageRgb, b: &ImageRgb, c1: f64, c2: f64) -> Field2 {
        let (w, h) = (a.width(), a.height());
        let mut out = Field2::zeros(w, h);
        let refl = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * (n - 1) - i as usize
            } else {
                i as usize
            }
        };
        for y in 0..h {
            for x in 0..w {
                let mut total = 0.0;
                for c in 0..3 {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    let mut mxx = 0.0;
                    let mut myy = 0.0;
                    let mut mxy = 0.0;
                    for dy in -1..=1_isize {
                        for dx in -1..=1_isize {
                            let xx = refl(x as isize + dx, w);
                            let yy = refl(y as isize + dy, h);
                            let va = a.at(xx, yy, c);
                            let vb = b.at(xx, yy, c);
                            mx += va;
                            my += vb;
                            mxx += va * va;
                            myy += vb * vb;
                            mxy += va * vb;
                        }
                    }
                    mx /= 9.0;
                    my /= 9.0;
                    mxx /= 9.0;
                    myy /= 9.0;
                    mxy /= 9.0;
                    let var_x = mxx - mx * mx;
                    let var_y = myy - my * my;
                    let cov = mxy - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
                }
                out.set(x, y, total / 3.0);
            }
        }
        out
    }

    #[test]
    fn ssim_matches_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random_image(&mut rng, 9, 7);
            let b = random_image(&mut rng, 9, 7);
            let got = ssim_map(&a, &b, SSIM_C1, SSIM_C2);
            let want = ssim_oracle(&a, &b, SSIM_C1, SSIM_C2);
            for i in 0..got.len() {
                assert!((got.data()[i] - want.data()[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn photometric_zero_for_perfect_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 8, 8);
        let m_o = OcclusionMask::all_true(8, 8);
        let m_i = IdentityMask::all_true(8, 8);
        let loss = photometric_loss(&img, &img, &m_o, &m_i);
        assert!(loss.value.abs() < 1e-12);
        assert!(!loss.empty_mask());
        // Identical images stay at zero under any mask pattern.
        let flags: Vec<bool> = (0..64).map(|i| i % 3 != 0).collect();
        let m_o = OcclusionMask::from_flags(8, 8, flags);
        let loss = photometric_loss(&img, &img, &m_o, &m_i);
        assert!(loss.value.abs() < 1e-12);
    }

    #[test]
    fn photometric_empty_mask_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 6, 6);
        let b = random_image(&mut rng, 6, 6);
        let m_o = OcclusionMask::from_flags(6, 6, vec![false; 36]);
        let m_i = IdentityMask::all_true(6, 6);
        let loss = photometric_loss(&a, &b, &m_o, &m_i);
        assert_eq!(loss.value, 0.0);
        assert!(loss.empty_mask());
    }

    #[test]
    fn photometric_constant_offset_closed_form() {
        let a = ImageRgb::filled(9, 9, [0.5; 3]);
        let b = ImageRgb::filled(9, 9, [0.6; 3]);
        let m_o = OcclusionMask::all_true(9, 9);
        let m_i = IdentityMask::all_true(9, 9);
        let loss = photometric_loss(&a, &b, &m_o, &m_i);
        let (mx, my) = (0.5, 0.6);
        let s = (2.0 * mx * my + SSIM_C1) * SSIM_C2
            / ((mx * mx + my * my + SSIM_C1) * SSIM_C2);
        let want = 0.15 * 0.1 + 0.85 * (1.0 - s) / 2.0;
        assert!(
            (loss.value - want).abs() < 1e-12,
            "got {} want {want}",
            loss.value
        );
    }

    #[test]
    fn smoothness_zero_on_constant_depth() {
        let z = DepthMap::all_valid(Field2::filled(10, 8, 3.0));
        let img = ImageRgb::filled(10, 8, [0.5; 3]);
        assert_eq!(
            smoothness_loss(&z, &img, SmoothnessTarget::MeanNormalizedDisparity),
            0.0
        );
    }

    #[test]
    fn smoothness_linear_disparity_ramp_closed_form() {
        // Disparity d(x) = d0 + s x on a constant image: the loss equals the
        // mean |slope| of the mean-normalized disparity.
        let (w, h) = (12, 5);
        let (d0, s) = (0.5, 0.03);
        let mut z = Field2::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                z.set(x, y, 1.0 / (d0 + s * x as f64));
            }
        }
        let z = DepthMap::all_valid(z);
        let img = ImageRgb::filled(w, h, [0.3; 3]);
        let got = smoothness_loss(&z, &img, SmoothnessTarget::MeanNormalizedDisparity);
        let mean_d = (0..w)
            .map(|x| d0 + s * x as f64)
            .sum::<f64>()
            / w as f64;
        let want = s / mean_d;
        assert!((got - want).abs() < 1e-12, "got {got} want {want}");
    }

    #[test]
    fn smoothness_matches_recomputation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (w, h) = (7, 6);
        let mut z = Field2::zeros(w, h);
        for v in z.data_mut() {
            *v = rng.random_range(0.5..5.0);
        }
        let z = DepthMap::all_valid(z);
        let img = random_image(&mut rng, w, h);
        let got = smoothness_loss(&z, &img, SmoothnessTarget::MeanNormalizedDisparity);

        // Direct recomputation.
        let d: Vec<f64> = z.z.data().iter().map(|&v| 1.0 / v).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let mut sx = 0.0;
        let mut nx = 0;
        let mut sy = 0.0;
        let mut ny = 0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let g = (0..3)
                        .map(|c| (img.at(x, y, c) - img.at(x + 1, y, c)).abs())
                        .sum::<f64>()
                        / 3.0;
                    sx += ((d[i + 1] - d[i]) / mean).abs() * (-g).exp();
                    nx += 1;
                }
                if y + 1 < h {
                    let g = (0..3)
                        .map(|c| (img.at(x, y, c) - img.at(x, y + 1, c)).abs())
                        .sum::<f64>()
                        / 3.0;
                    sy += ((d[i + w] - d[i]) / mean).abs() * (-g).exp();
                    ny += 1;
                }
            }
        }
        let want = sx / nx as f64 + sy / ny as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn consistency_reference_values() {
        let z1 = DepthMap::all_valid(Field2::filled(5, 5, 3.0));
        let z2 = DepthMap::all_valid(Field2::filled(5, 5, 1.0));
        let m = OcclusionMask::all_true(5, 5);
        let equal = depth_consistency_loss(&z1, &z1, &m);
        assert_eq!(equal.value, 0.0);
        let half = depth_consistency_loss(&z1, &z2, &m);
        assert!((half.value - 0.5).abs() < 1e-15);
        assert_eq!(half.counted, 25);
        let empty = depth_consistency_loss(&z1, &z2, &OcclusionMask::from_flags(5, 5, vec![false; 25]));
        assert_eq!(empty.value, 0.0);
        assert!(empty.empty_mask());
    }

    #[test]
    fn brightness_reg_reference_values() {
        assert_eq!(brightness_reg_loss(&BrightnessParams::default()), 0.0);
        let p = BrightnessParams { a: 1.5, b: 0.2 };
        assert!((brightness_reg_loss(&p) - 0.29).abs() < 1e-15);
        // Quadratic gradient against finite differences.
        let h = 1e-6;
        let ga = (brightness_reg_loss(&BrightnessParams { a: 1.5 + h, b: 0.2 })
            - brightness_reg_loss(&BrightnessParams { a: 1.5 - h, b: 0.2 }))
            / (2.0 * h);
        let gb = (brightness_reg_loss(&BrightnessParams { a: 1.5, b: 0.2 + h })
            - brightness_reg_loss(&BrightnessParams { a: 1.5, b: 0.2 - h }))
            / (2.0 * h);
        assert!((ga - 2.0 * 0.5).abs() < 1e-8);
        assert!((gb - 2.0 * 0.2).abs() < 1e-8);
    }

    #[test]
    fn total_loss_reference_values() {
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            eta: 0.0,
        };
        let b = total_loss(1.0, 5.0, 7.0, 9.0, &w);
        assert_eq!(b.total, 1.0);
        let all_zero = total_loss(0.0, 0.0, 0.0, 0.0, &LossWeights::default());
        assert_eq!(all_zero.total, 0.0);
    }

    proptest! {
        #[test]
        fn total_loss_matches_weighted_sum_oracle(
            lp in 0.0..10.0f64,
            ls in 0.0..10.0f64,
            ld in 0.0..10.0f64,
            lr in 0.0..10.0f64,
            alpha in 0.0..2.0f64,
            beta in 0.0..2.0f64,
            eta in 0.0..2.0f64,
        ) {
            let w = LossWeights { alpha, beta, eta };
            let b = total_loss(lp, ls, ld, lr, &w);
            let want = lp + alpha * ls + beta * ld + eta * lr;
            prop_assert!((b.total - want).abs() < 1e-12);
            prop_assert!((b.total - (b.photometric + alpha * b.smoothness
                + beta * b.depth_consistency + eta * b.brightness_reg)).abs() < 1e-12);
        }

        #[test]
        fn consistency_is_symmetric_and_bounded(
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (6, 4);
            let mut a = Field2::zeros(w, h);
            let mut b = Field2::zeros(w, h);
            for v in a.data_mut() { *v = rng.random_range(0.0..10.0); }
            for v in b.data_mut() { *v = rng.random_range(0.0..10.0); }
            let a = DepthMap::all_valid(a);
            let b = DepthMap::all_valid(b);
            let m = OcclusionMask::all_true(w, h);
            let ab = depth_consistency_loss(&a, &b, &m);
            let ba = depth_consistency_loss(&b, &a, &m);
            prop_assert!((ab.value - ba.value).abs() < 1e-12);
            prop_assert!(ab.value >= 0.0 && ab.value < 1.0);
        }
    }

    #[test]
    fn box_adjoint_is_transpose() {
        // <box(x), y> must equal <x, box_adjoint(y)>.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (w, h) = (rng.random_range(1..8), rng.random_range(1..8));
            let mut x = Field2::zeros(w, h);
            let mut y = Field2::zeros(w, h);
            for v in x.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            for v in y.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let bx = box3_reflect(&x);
            let bty = box3_reflect_adjoint(&y);
            let lhs: f64 = bx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(bty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{w}x{h}: {lhs} vs {rhs}");
        }
    }
}
