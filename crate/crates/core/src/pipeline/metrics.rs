//! Trajectory and map accuracy against ground truth.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};
use crate::localization::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub frame_id: usize,
    pub rotation_error_rad: f64,
    pub center_error_mm: f64,
}

/// Estimated pose of a revisit relative to the frame it revisits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopResidual {
    pub first: usize,
    pub last: usize,
    pub rotation_rad: f64,
    pub translation_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleFit {
    pub center: [f64; 3],
    pub normal: [f64; 3],
    pub radius: f64,
    /// RMS of the combined in-plane radial and out-of-plane residuals.
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub frames: usize,
    /// RMS camera-center error after the best rigid alignment, mm.
    pub ate_rms_mm: f64,
    /// Per-frame errors with both trajectories anchored at their first pose.
    pub per_frame: Vec<FrameError>,
    /// One entry per frame whose true pose coincides with the first frame's.
    pub loop_residuals: Vec<LoopResidual>,
    pub circle_fit: Option<CircleFit>,
    pub map_rms_mm: Option<f64>,
}

impl EvaluationReport {
    /// Largest loop residual, if the truth revisits its start.
    pub fn loop_residual(&self) -> Option<LoopResidual> {
        self.loop_residuals
            .iter()
            .copied()
            .max_by(|a, b| a.translation_mm.total_cmp(&b.translation_mm))
    }
}

/// Rigid transform minimizing `sum |truth_k - (R est_k + T)|^2`. Unlike
/// registration's solver this accepts collinear sets; any minimizer then
/// gives the same residual.
pub fn align_points(est: &[Point3], truth: &[Point3]) -> RigidTransform {
    let n = est.len().max(1) as f64;
    let ce = est.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let ct = truth.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let h = est.iter().zip(truth).fold(Matrix3::zeros(), |a, (e, t)| {
        a + (e.coords - ce) * (t.coords - ct).transpose()
    });
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v_t"));
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    RigidTransform::new(r, ct - r * ce)
}

pub fn absolute_trajectory_error(est: &[Point3], truth: &[Point3]) -> f64 {
    let a = align_points(est, truth);
    let sum: f64 = est
        .iter()
        .zip(truth)
        .map(|(e, t)| (a.apply(e) - t).norm_squared())
        .sum();
    (sum / est.len().max(1) as f64).sqrt()
}

/// Least-squares circle through 3D points: plane by principal axes, then an
/// algebraic fit refined by Gauss-Newton on the geometric residual.
pub fn fit_circle(points: &[Point3]) -> Option<CircleFit> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        a + (p.coords - c) * (p.coords - c).transpose()
    });
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let ax = eig.eigenvectors.column(order[0]).into_owned();
    let ay = eig.eigenvectors.column(order[1]).into_owned();
    let normal = eig.eigenvectors.column(order[2]).into_owned();
    let flat: Vec<Vector2<f64>> = points
        .iter()
        .map(|p| Vector2::new((p.coords - c).dot(&ax), (p.coords - c).dot(&ay)))
        .collect();
    // x² + y² = 2 a x + 2 b y + k
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for q in &flat {
        let row = Vector3::new(2.0 * q.x, 2.0 * q.y, 1.0);
        ata += row * row.transpose();
        atb += row * q.norm_squared();
    }
    let sol = ata.lu().solve(&atb)?;
    let mut center = Vector2::new(sol.x, sol.y);
    let mut radius = (sol.z + center.norm_squared()).max(0.0).sqrt();
    for _ in 0..20 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for q in &flat {
            let d = q - center;
            let dist = d.norm();
            if dist == 0.0 {
                continue;
            }
            let j = Vector3::new(-d.x / dist, -d.y / dist, -1.0);
            let r = dist - radius;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else {
            break;
        };
        center += Vector2::new(step.x, step.y);
        radius += step.z;
        if step.norm() < 1e-14 * radius.abs().max(1.0) {
            break;
        }
    }
    let sum: f64 = points
        .iter()
        .zip(&flat)
        .map(|(p, q)| {
            let off = (p.coords - c).dot(&normal);
            let radial = (q - center).norm() - radius;
            off * off + radial * radial
        })
        .sum();
    let center3 = c + ax * center.x + ay * center.y;
    Some(CircleFit {
        center: [center3.x, center3.y, center3.z],
        normal: [normal.x, normal.y, normal.z],
        radius,
        rms: (sum / n).sqrt(),
    })
}

/// Poses coincide when both rotation and translation agree this closely.
const REVISIT_ROTATION: f64 = 1e-9;
const REVISIT_TRANSLATION: f64 = 1e-6;

/// Compares an estimated trajectory with ground truth. Frame ids must pair
/// one to one.
pub fn evaluate(estimated: &Trajectory, truth: &Trajectory) -> Result<EvaluationReport> {
    if estimated.len() != truth.len() {
        return Err(Error::Input(format!(
            "trajectory lengths differ: {} estimated, {} true",
            estimated.len(),
            truth.len()
        )));
    }
    if estimated
        .poses
        .iter()
        .zip(&truth.poses)
        .any(|(a, b)| a.frame_id != b.frame_id)
    {
        return Err(Error::Input("trajectory frame ids do not pair".into()));
    }
    let est_c = estimated.centers();
    let true_c = truth.centers();
    let ate = absolute_trajectory_error(&est_c, &true_c);
    let mut per_frame = Vec::with_capacity(estimated.len());
    if let (Some(e0), Some(t0)) = (estimated.poses.first(), truth.poses.first()) {
        // Map estimated world into true world through the first pose.
        let gauge = t0.camera_to_world().compose(&e0.world_to_camera);
        for (e, t) in estimated.poses.iter().zip(&truth.poses) {
            let aligned = gauge.compose(&e.camera_to_world());
            let diff = t.world_to_camera.compose(&aligned);
            per_frame.push(FrameError {
                frame_id: e.frame_id,
                rotation_error_rad: diff.rotation_angle(),
                center_error_mm: (gauge.apply(&e.center) - t.center).norm(),
            });
        }
    }
    let mut loop_residuals = Vec::new();
    if let (Some(e0), Some(t0)) = (estimated.poses.first(), truth.poses.first()) {
        for (e, t) in estimated.poses.iter().zip(&truth.poses).skip(1) {
            let (dr, dt) = t0
                .world_to_camera
                .compose(&t.camera_to_world())
                .deviation_from_identity();
            if dr < REVISIT_ROTATION && dt < REVISIT_TRANSLATION * (1.0 + t0.center.coords.norm()) {
                let rel = e0.world_to_camera.compose(&e.camera_to_world());
                loop_residuals.push(LoopResidual {
                    first: e0.frame_id,
                    last: e.frame_id,
                    rotation_rad: rel.rotation_angle(),
                    translation_mm: (e.center - e0.center).norm(),
                });
            }
        }
    }
    Ok(EvaluationReport {
        frames: estimated.len(),
        ate_rms_mm: ate,
        per_frame,
        loop_residuals,
        circle_fit: None,
        map_rms_mm: None,
    })
}

/// RMS distance between reconstructed points and their true positions.
/// Each item pairs a point with its truth, both already in one frame.
pub fn pointwise_rms(pairs: impl IntoIterator<Item = (Point3, Point3)>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in pairs {
        sum += (a - b).norm_squared();
        n += 1;
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localization::SensorPose;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn circle_trajectory(n: usize, period: usize) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|k| {
                    let a = std::f64::consts::TAU * (k % period) as f64 / period as f64;
                    let orbit = RigidTransform::from_axis_angle(&Vector3::y(), a, Vector3::zeros());
                    let cam =
                        RigidTransform::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -470.0));
                    SensorPose::new(k, k, orbit.compose(&cam).inverse())
                })
                .collect(),
        )
        .unwrap()
    }

    fn moved(t: &Trajectory, g: &RigidTransform) -> Trajectory {
        Trajectory::new(
            t.poses
                .iter()
                .map(|p| {
                    SensorPose::new(
                        p.frame_id,
                        p.timestamp,
                        g.compose(&p.camera_to_world()).inverse(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let t = circle_trajectory(26, 13);
        let r = evaluate(&t, &t).unwrap();
        assert!(r.ate_rms_mm < 1e-9);
        assert!(r
            .per_frame
            .iter()
            .all(|e| e.rotation_error_rad < 1e-9 && e.center_error_mm < 1e-9));
        assert_eq!(r.loop_residuals.len(), 1);
        assert_eq!(
            (r.loop_residuals[0].first, r.loop_residuals[0].last),
            (0, 13)
        );
        assert!(r.loop_residual().unwrap().translation_mm < 1e-9);
    }

    #[test]
    fn global_rigid_motion_is_invisible() {
        let t = circle_trajectory(13, 13);
        let g = RigidTransform::from_axis_angle(
            &Vector3::new(1.0, 2.0, 0.5),
            0.7,
            Vector3::new(100.0, -40.0, 7.0),
        );
        let r = evaluate(&moved(&t, &g), &t).unwrap();
        assert!(r.ate_rms_mm < 1e-9);
        assert!(r
            .per_frame
            .iter()
            .all(|e| e.rotation_error_rad < 1e-9 && e.center_error_mm < 1e-9));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(evaluate(&circle_trajectory(5, 5), &circle_trajectory(6, 6)).is_err());
    }

    #[test]
    fn ate_matches_jitter_level() {
        // Isotropic jitter with 1 mm RMS length.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0 / 3f64.sqrt()).unwrap();
        let truth: Vec<Point3> = (0..1000)
            .map(|k| {
                Point3::new(
                    k as f64,
                    (k as f64 * 0.01).sin() * 50.0,
                    rng.random_range(-5.0..5.0),
                )
            })
            .collect();
        let est: Vec<Point3> = truth
            .iter()
            .map(|p| p + Vector3::from_fn(|_, _| normal.sample(&mut rng)))
            .collect();
        let ate = absolute_trajectory_error(&est, &truth);
        assert!((ate - 1.0).abs() < 0.3, "{ate}");
    }

    #[test]
    fn collinear_trajectories_align() {
        let truth: Vec<Point3> = (0..10)
            .map(|k| Point3::new(10.0 * k as f64, 0.0, 0.0))
            .collect();
        let g = RigidTransform::from_axis_angle(&Vector3::z(), 0.3, Vector3::new(1.0, 2.0, 3.0));
        let est: Vec<Point3> = truth.iter().map(|p| g.apply(p)).collect();
        assert!(absolute_trajectory_error(&est, &truth) < 1e-9);
    }

    #[test]
    fn circle_fit_recovers_tilted_circle() {
        let g = RigidTransform::from_axis_angle(
            &Vector3::new(0.3, 0.1, 1.0),
            0.4,
            Vector3::new(5.0, -2.0, 30.0),
        );
        let pts: Vec<Point3> = (0..13)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / 13.0;
                g.apply(&Point3::new(470.0 * a.cos(), 470.0 * a.sin(), 0.0))
            })
            .collect();
        let fit = fit_circle(&pts).unwrap();
        assert!((fit.radius - 470.0).abs() < 1e-9);
        assert!(fit.rms < 1e-9);
        let c = Vector3::from(fit.center);
        assert!((c - g.translation).norm() < 1e-9);
    }

    #[test]
    fn circle_fit_on_partial_arc_with_offset_points() {
        let mut pts: Vec<Point3> = (0..8)
            .map(|k| {
                let a = 0.2 * k as f64;
                Point3::new(100.0 * a.cos(), 0.0, 100.0 * a.sin())
            })
            .collect();
        pts[3].y += 1.0;
        let fit = fit_circle(&pts).unwrap();
        assert!(fit.rms > 0.1 && fit.rms < 1.0, "{}", fit.rms);
    }

    #[test]
    fn pointwise_rms_examples() {
        assert_eq!(pointwise_rms(Vec::new()), None);
        let o = Point3::origin();
        assert_eq!(
            pointwise_rms([(o, Point3::new(3.0, 4.0, 0.0)), (o, o)]),
            Some((12.5f64).sqrt())
        );
    }

    proptest! {
        #[test]
        fn ate_is_gauge_invariant(seed in any::<u64>(), angle in -3.0..3.0f64, ax in -1.0..1.0f64, ay in -1.0..1.0f64, t in -500.0..500.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<Point3> = (0..30).map(|_| Point3::new(rng.random_range(-300.0..300.0), rng.random_range(-50.0..50.0), rng.random_range(-300.0..300.0))).collect();
            let est: Vec<Point3> = truth.iter().map(|p| p + Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
            let g = RigidTransform::from_axis_angle(&Vector3::new(ax, ay, 0.7), angle, Vector3::new(t, -t, 0.5 * t));
            let moved: Vec<Point3> = est.iter().map(|p| g.apply(p)).collect();
            let (a, b) = (absolute_trajectory_error(&est, &truth), absolute_trajectory_error(&moved, &truth));
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }
}
