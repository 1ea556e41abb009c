//! Depth evaluation metrics and pose-recovery error.

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::grid::DepthMap;

/// The seven standard depth metrics. The squared-norm terms are squared
/// differences, matching the definitions the published tables compare under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3
        )
    }
}

/// Evaluation depth clamp applied to predictions before scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalClamp {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for EvalClamp {
    fn default() -> Self {
        EvalClamp {
            min_depth: 0.1,
            max_depth: 80.0,
        }
    }
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Scores a predicted depth map against ground truth over jointly valid
/// pixels, optionally rescaling the prediction by the ratio of medians
/// before clamping.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    clamp: EvalClamp,
    median_scale: bool,
) -> Result<DepthMetrics> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::InvalidArgument(format!(
            "depth map shapes differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut pred_v = Vec::new();
    let mut gt_v = Vec::new();
    for i in 0..pred.z.len() {
        if pred.valid[i] && gt.valid[i] {
            let g = gt.z.data()[i];
            if !(g > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "ground-truth depth must be positive on valid pixels, got {g}"
                )));
            }
            pred_v.push(pred.z.data()[i]);
            gt_v.push(g);
        }
    }
    if pred_v.is_empty() {
        return Err(Error::EmptyValidSet(
            "depth metrics need at least one jointly valid pixel",
        ));
    }

    let scale = if median_scale {
        let gt_med = median(&mut gt_v.clone());
        let pred_med = median(&mut pred_v.clone());
        if pred_med > 0.0 {
            gt_med / pred_med
        } else {
            1.0
        }
    } else {
        1.0
    };

    let n = pred_v.len() as f64;
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let (mut d1, mut d2, mut d3) = (0.0, 0.0, 0.0);
    for (&p_raw, &g) in pred_v.iter().zip(gt_v.iter()) {
        let p = (p_raw * scale).clamp(clamp.min_depth, clamp.max_depth);
        let diff = g - p;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let dl = g.ln() - p.ln();
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        if ratio < 1.25 {
            d1 += 1.0;
        }
        if ratio < 1.25 * 1.25 {
            d2 += 1.0;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            d3 += 1.0;
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta1: d1 / n,
        delta2: d2 / n,
        delta3: d3 / n,
    })
}

/// Translation distance and geodesic rotation angle between two transforms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub translation: f64,
    pub rotation_deg: f64,
}

pub fn pose_error(pred: &RigidTransform, gt: &RigidTransform) -> PoseError {
    let translation = (pred.translation - gt.translation).norm();
    let rel = pred.rotation * gt.rotation.transpose();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    PoseError {
        translation,
        rotation_deg: cos.acos().to_degrees(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use crate::grid::Field2;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_from(values: &[f64], w: usize, h: usize) -> DepthMap {
        DepthMap::all_valid(Field2::from_vec(w, h, values.to_vec()))
    }

    fn wide_clamp() -> EvalClamp {
        EvalClamp {
            min_depth: 1e-3,
            max_depth: 1e3,
        }
    }

    #[test]
    fn perfect_prediction_scores_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..24).map(|_| rng.random_range(1.0..10.0)).collect();
        let d = map_from(&v, 6, 4);
        let m = depth_metrics(&d, &d, wide_clamp(), false).unwrap();
        assert_eq!(
            (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn double_prediction_reference_values() {
        let gt = map_from(&vec![2.0; 16], 4, 4);
        let pred = map_from(&vec![4.0; 16], 4, 4);
        let m = depth_metrics(&pred, &gt, wide_clamp(), false).unwrap();
        assert!((m.abs_rel - 1.0).abs() < 1e-12);
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 0.0);
        // 1.25^3 = 1.953 < 2, so even the loosest threshold fails.
        assert_eq!(m.delta3, 0.0);
        // And median scaling makes it perfect again.
        let m = depth_metrics(&pred, &gt, wide_clamp(), true).unwrap();
        assert!(m.abs_rel.abs() < 1e-12);
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn metrics_invariant_to_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt: Vec<f64> = (0..30).map(|_| rng.random_range(1.0..9.0)).collect();
        let pred: Vec<f64> = (0..30).map(|_| rng.random_range(1.0..9.0)).collect();
        let m1 = depth_metrics(
            &map_from(&pred, 6, 5),
            &map_from(&gt, 6, 5),
            wide_clamp(),
            true,
        )
        .unwrap();
        let mut idx: Vec<usize> = (0..30).collect();
        for i in (1..30).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let pred_p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
        let gt_p: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
        let m2 = depth_metrics(
            &map_from(&pred_p, 6, 5),
            &map_from(&gt_p, 6, 5),
            wide_clamp(),
            true,
        )
        .unwrap();
        assert!((m1.abs_rel - m2.abs_rel).abs() < 1e-12);
        assert!((m1.rmse - m2.rmse).abs() < 1e-12);
        assert!((m1.delta2 - m2.delta2).abs() < 1e-12);
    }

    #[test]
    fn median_scaling_cancels_global_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt: Vec<f64> = (0..30).map(|_| rng.random_range(1.0..9.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|v| v * rng.random_range(0.9..1.1)).collect();
        let m1 = depth_metrics(
            &map_from(&pred, 6, 5),
            &map_from(&gt, 6, 5),
            wide_clamp(),
            true,
        )
        .unwrap();
        let scaled: Vec<f64> = pred.iter().map(|v| v * 7.3).collect();
        let m2 = depth_metrics(
            &map_from(&scaled, 6, 5),
            &map_from(&gt, 6, 5),
            wide_clamp(),
            true,
        )
        .unwrap();
        assert!((m1.abs_rel - m2.abs_rel).abs() < 1e-12);
        assert!((m1.rmse - m2.rmse).abs() < 1e-9);
    }

    #[test]
    fn delta_thresholds_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<f64> = (0..40).map(|_| rng.random_range(1.0..9.0)).collect();
        let pred: Vec<f64> = gt
            .iter()
            .map(|v| v * rng.random_range(0.5..2.0))
            .collect();
        let m = depth_metrics(
            &map_from(&pred, 8, 5),
            &map_from(&gt, 8, 5),
            wide_clamp(),
            false,
        )
        .unwrap();
        assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
    }

    #[test]
    fn empty_joint_set_errors() {
        let gt = DepthMap::invalid(4, 4);
        let pred = map_from(&vec![1.0; 16], 4, 4);
        assert!(matches!(
            depth_metrics(&pred, &gt, wide_clamp(), false),
            Err(Error::EmptyValidSet(_))
        ));
    }

    #[test]
    fn pose_error_reference_values() {
        let t = se3_exp(&Twist::new(
            Vector3::new(0.1, -0.2, 0.3),
            Vector3::new(1.0, 2.0, 3.0),
        ));
        let e = pose_error(&t, &t);
        assert!(e.translation < 1e-12);
        assert!(e.rotation_deg < 1e-5);

        let one_deg = 1.0_f64.to_radians();
        for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            let r = se3_exp(&Twist::new(axis * one_deg, Vector3::zeros()));
            let e = pose_error(&compose_like(&t, &r), &t);
            assert!((e.rotation_deg - 1.0).abs() < 1e-9, "axis {axis:?}");
        }
    }

    fn compose_like(t: &RigidTransform, r: &RigidTransform) -> RigidTransform {
        RigidTransform::new(t.rotation * r.rotation, t.translation)
    }

    #[test]
    fn pose_error_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                se3_exp(&Twist::new(
                    Vector3::new(
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-1.5..1.5),
                    ),
                    Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ),
                ))
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let got = pose_error(&a, &b);
            let qa = nalgebra::UnitQuaternion::from_matrix(&a.rotation);
            let qb = nalgebra::UnitQuaternion::from_matrix(&b.rotation);
            let want = qa.angle_to(&qb).to_degrees();
            assert!(
                (got.rotation_deg - want).abs() < 1e-6,
                "{} vs {want}",
                got.rotation_deg
            );
            let want_t = (a.translation - b.translation).norm();
            assert!((got.translation - want_t).abs() < 1e-12);
        }
    }
}
