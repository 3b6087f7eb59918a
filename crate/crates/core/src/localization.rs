//! Sensor pose from 3D-2D matches: DLT projection estimate, factorization
//! into intrinsics and pose, trajectory assembly and loop drift handling.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    nearest_rotation, project, DeviceCalibration, Intrinsics, Pixel, Point3, ProjectionMatrix,
    RigidTransform,
};
use crate::registration::{match_features, Feature, Frame};

/// Minimum matches for a unique DLT solution.
pub const MIN_DLT_MATCHES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match3D2D {
    pub world: Point3,
    pub image: Pixel,
}

/// Stacked homogeneous system `A f = 0`, two rows per match.
#[derive(Debug, Clone, PartialEq)]
pub struct DltSystem {
    pub matrix: DMatrix<f64>,
}

impl DltSystem {
    pub fn matches(&self) -> usize {
        self.matrix.nrows() / 2
    }
}

pub fn build_dlt_system(matches: &[Match3D2D]) -> Result<DltSystem> {
    if matches.len() < MIN_DLT_MATCHES {
        return Err(Error::InsufficientMatches {
            found: matches.len(),
            required: MIN_DLT_MATCHES,
        });
    }
    let mut a = DMatrix::zeros(2 * matches.len(), 12);
    for (k, m) in matches.iter().enumerate() {
        let (x, y, z) = (m.world.x, m.world.y, m.world.z);
        let (u, v) = (m.image.u, m.image.v);
        let r = 2 * k;
        for (c, val) in [x, y, z, 1.0].into_iter().enumerate() {
            a[(r, c)] = val;
            a[(r, 8 + c)] = -u * val;
            a[(r + 1, 4 + c)] = val;
            a[(r + 1, 8 + c)] = -v * val;
        }
    }
    Ok(DltSystem { matrix: a })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DltSolution {
    /// Unit-norm solution reshaped row-major.
    pub projection: ProjectionMatrix,
    /// `|A f|` for the unit-norm solution: the smallest singular value.
    pub residual: f64,
}

/// Second-smallest singular value below this fraction of the largest means
/// the null space is not one-dimensional.
const RANK_TOLERANCE: f64 = 1e-9;

/// Right singular vector of the smallest singular value.
pub fn solve_projection_dlt(system: &DltSystem) -> Result<DltSolution> {
    let a = &system.matrix;
    if a.nrows() < 2 * MIN_DLT_MATCHES || a.ncols() != 12 {
        return Err(Error::InsufficientMatches {
            found: a.nrows() / 2,
            required: MIN_DLT_MATCHES,
        });
    }
    // Eigen-decomposition of AᵀA keeps the cost independent of N.
    let ata = a.transpose() * a;
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let sv = |k: usize| eig.eigenvalues[order[k]].max(0.0).sqrt();
    if sv(1) <= RANK_TOLERANCE * sv(11) {
        return Err(Error::DegenerateConfiguration(format!(
            "DLT system rank below 11 (singular value ratio {:e})",
            sv(1) / sv(11)
        )));
    }
    let f = eig.eigenvectors.column(order[0]).normalize();
    let projection = ProjectionMatrix::from_vector(f.as_slice());
    Ok(DltSolution {
        projection,
        residual: (a * &f).norm(),
    })
}

/// Similarity taking the centroid to the origin and the RMS distance to
/// `target`.
fn normalizer(points: &[Vector3<f64>], target: f64) -> (Vector3<f64>, f64) {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    let rms = (points.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / n).sqrt();
    (c, if rms > 0.0 { target / rms } else { 1.0 })
}

/// DLT on conditioned coordinates (image points to RMS distance √2, world
/// points to √3), mapped back to the original coordinates.
pub fn estimate_projection(matches: &[Match3D2D]) -> Result<DltSolution> {
    if matches.len() < MIN_DLT_MATCHES {
        return Err(Error::InsufficientMatches {
            found: matches.len(),
            required: MIN_DLT_MATCHES,
        });
    }
    let img: Vec<Vector3<f64>> = matches
        .iter()
        .map(|m| Vector3::new(m.image.u, m.image.v, 0.0))
        .collect();
    let wld: Vec<Vector3<f64>> = matches.iter().map(|m| m.world.coords).collect();
    let (ci, si) = normalizer(&img, std::f64::consts::SQRT_2);
    let (cw, sw) = normalizer(&wld, 3f64.sqrt());
    let normalized: Vec<Match3D2D> = matches
        .iter()
        .map(|m| Match3D2D {
            world: Point3::from((m.world.coords - cw) * sw),
            image: Pixel::new((m.image.u - ci.x) * si, (m.image.v - ci.y) * si),
        })
        .collect();
    let solution = solve_projection_dlt(&build_dlt_system(&normalized)?)?;
    // F = Ti⁻¹ Fn Tw
    let ti_inv = Matrix3::new(1.0 / si, 0.0, ci.x, 0.0, 1.0 / si, ci.y, 0.0, 0.0, 1.0);
    let mut tw = Matrix4::identity() * sw;
    tw[(3, 3)] = 1.0;
    tw.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-cw * sw));
    let f: Matrix3x4<f64> = ti_inv * solution.projection.0 * tw;
    let f = f / f.norm();
    Ok(DltSolution {
        projection: ProjectionMatrix(f),
        residual: solution.residual,
    })
}

/// World-to-camera rotation and translation from `F ∝ I [R | T]`.
pub fn decompose_projection(
    f: &ProjectionMatrix,
    intrinsics: &Intrinsics,
) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let k_inv = intrinsics.inverse_matrix();
    let m = k_inv * f.0.fixed_view::<3, 3>(0, 0);
    let row_norms: f64 = (0..3).map(|r| m.row(r).norm()).sum();
    if !(row_norms > 0.0) || !row_norms.is_finite() {
        return Err(Error::InconsistentSolution(
            "projection has a null rotation block".into(),
        ));
    }
    // A proper rotation has det +1, which fixes the sign of the scale.
    let scale = m.determinant().signum() * 3.0 / row_norms;
    let scaled = m * scale;
    let r = nearest_rotation(&scaled);
    let dev = (r - scaled).norm();
    if dev > 0.1 {
        return Err(Error::InconsistentSolution(format!(
            "rotation block is {dev:.3} (Frobenius) from the nearest rotation"
        )));
    }
    let t = k_inv * f.0.column(3) * scale;
    Ok((r, t))
}

/// `O_w = -Rᵀ T`.
pub fn camera_center(r: &Matrix3<f64>, t: &Vector3<f64>) -> Point3 {
    Point3::from(-(r.transpose() * t))
}

/// Camera pose in the map frame: `x_cam = R x_world + T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorPose {
    pub frame_id: usize,
    pub timestamp: usize,
    pub world_to_camera: RigidTransform,
    pub center: Point3,
}

impl SensorPose {
    pub fn new(frame_id: usize, timestamp: usize, world_to_camera: RigidTransform) -> Self {
        let center = camera_center(&world_to_camera.rotation, &world_to_camera.translation);
        let check =
            center.coords + world_to_camera.rotation.transpose() * world_to_camera.translation;
        assert!(
            check.norm() <= 1e-9 * (1.0 + world_to_camera.translation.norm()),
            "camera center inconsistent with pose"
        );
        Self {
            frame_id,
            timestamp,
            world_to_camera,
            center,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.world_to_camera.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.world_to_camera.translation
    }

    pub fn camera_to_world(&self) -> RigidTransform {
        self.world_to_camera.inverse()
    }

    /// Pose of a camera mounted at `camera` (sensor-to-camera extrinsics) on
    /// a sensor placed by `world_from_sensor`.
    pub fn from_sensor(
        frame_id: usize,
        world_from_sensor: &RigidTransform,
        camera: &DeviceCalibration,
    ) -> Self {
        let w2c = camera
            .extrinsics
            .as_transform()
            .compose(&world_from_sensor.inverse());
        Self::new(frame_id, frame_id, w2c)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<SensorPose>,
    pub ground_truth: Option<Vec<SensorPose>>,
}

impl Trajectory {
    pub fn new(poses: Vec<SensorPose>) -> Result<Self> {
        if poses.windows(2).any(|w| w[1].frame_id <= w[0].frame_id) {
            return Err(Error::Input(
                "trajectory frame ids must strictly increase".into(),
            ));
        }
        Ok(Self {
            poses,
            ground_truth: None,
        })
    }

    pub fn with_ground_truth(mut self, truth: Vec<SensorPose>) -> Result<Self> {
        if truth.len() != self.poses.len()
            || truth
                .iter()
                .zip(&self.poses)
                .any(|(a, b)| a.frame_id != b.frame_id)
        {
            return Err(Error::Input(
                "ground truth does not pair with the trajectory".into(),
            ));
        }
        self.ground_truth = Some(truth);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn centers(&self) -> Vec<Point3> {
        self.poses.iter().map(|p| p.center).collect()
    }
}

/// A map point with the feature that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub world: Point3,
    pub feature: Feature,
    pub frame_id: usize,
}

/// Lifts every liftable feature of every frame into the map frame.
pub fn build_landmarks(frames: &[Frame], world_from_frame: &[RigidTransform]) -> Vec<Landmark> {
    frames
        .iter()
        .zip(world_from_frame)
        .flat_map(|(frame, t)| {
            frame
                .features
                .iter()
                .zip(frame.feature_points())
                .filter_map(move |(f, p)| {
                    p.map(|p| Landmark {
                        world: t.apply(&p),
                        feature: f.clone(),
                        frame_id: frame.id(),
                    })
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationParams {
    pub ratio: f64,
    pub ransac_iterations: usize,
    /// Reprojection inlier threshold, pixels.
    pub threshold_px: f64,
    pub seed: u64,
    /// Landmarks from frames within this many ids of the query are
    /// candidates; 0 uses only the frame's own landmarks.
    pub neighbor_window: usize,
}

impl Default for LocalizationParams {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            ransac_iterations: 500,
            threshold_px: 2.0,
            seed: 0,
            neighbor_window: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: SensorPose,
    pub matches: usize,
    pub inliers: usize,
    pub reprojection_rms: f64,
    pub dlt_residual: f64,
}

fn reprojection_errors(f: &ProjectionMatrix, matches: &[Match3D2D]) -> Vec<f64> {
    matches
        .iter()
        .map(|m| match project(f, &m.world) {
            Ok(p)
                if f.homogeneous_depth(&m.world) * f.0.fixed_view::<3, 3>(0, 0).determinant()
                    > 0.0 =>
            {
                p.distance(&m.image)
            }
            _ => f64::INFINITY,
        })
        .collect()
}

/// RANSAC over minimal DLT samples, then refits on the inlier set until it
/// stops changing.
pub fn estimate_projection_robust(
    matches: &[Match3D2D],
    params: &LocalizationParams,
) -> Result<(DltSolution, Vec<usize>)> {
    if matches.len() < MIN_DLT_MATCHES {
        return Err(Error::InsufficientMatches {
            found: matches.len(),
            required: MIN_DLT_MATCHES,
        });
    }
    let inliers_of = |f: &ProjectionMatrix| -> Vec<usize> {
        reprojection_errors(f, matches)
            .iter()
            .enumerate()
            .filter(|(_, e)| **e <= params.threshold_px)
            .map(|(i, _)| i)
            .collect()
    };
    let mut best: Vec<usize> = Vec::new();
    if matches.len() > MIN_DLT_MATCHES {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let samples: Vec<Vec<usize>> = (0..params.ransac_iterations)
            .map(|_| sample(&mut rng, matches.len(), MIN_DLT_MATCHES).into_vec())
            .collect();
        let counts: Vec<Vec<usize>> = samples
            .par_iter()
            .map(|s| {
                let subset: Vec<Match3D2D> = s.iter().map(|&i| matches[i]).collect();
                estimate_projection(&subset)
                    .map(|sol| inliers_of(&sol.projection))
                    .unwrap_or_default()
            })
            .collect();
        // First maximum, so the result does not depend on scheduling.
        for c in counts {
            if c.len() > best.len() {
                best = c;
            }
        }
    }
    if best.len() < MIN_DLT_MATCHES {
        best = (0..matches.len()).collect();
    }
    let mut solution = None;
    for _ in 0..10 {
        let subset: Vec<Match3D2D> = best.iter().map(|&i| matches[i]).collect();
        let sol = estimate_projection(&subset)?;
        let next = inliers_of(&sol.projection);
        solution = Some(sol);
        if next == best || next.len() < MIN_DLT_MATCHES {
            break;
        }
        best = next;
    }
    let solution = solution.expect("at least one refit");
    if best.len() < MIN_DLT_MATCHES {
        return Err(Error::InsufficientMatches {
            found: best.len(),
            required: MIN_DLT_MATCHES,
        });
    }
    Ok((solution, best))
}

/// Pose from explicit 3D-2D matches.
pub fn estimate_pose_from_matches(
    frame_id: usize,
    matches: &[Match3D2D],
    intrinsics: &Intrinsics,
    params: &LocalizationParams,
) -> Result<PoseEstimate> {
    let (solution, inliers) = estimate_projection_robust(matches, params)?;
    let (r, t) = decompose_projection(&solution.projection, intrinsics)?;
    let pose = SensorPose::new(frame_id, frame_id, RigidTransform::new(r, t));
    let errors = reprojection_errors(&solution.projection, matches);
    let rms =
        (inliers.iter().map(|&i| errors[i] * errors[i]).sum::<f64>() / inliers.len() as f64).sqrt();
    Ok(PoseEstimate {
        pose,
        matches: matches.len(),
        inliers: inliers.len(),
        reprojection_rms: rms,
        dlt_residual: solution.residual,
    })
}

/// Matches the frame's features against candidate landmarks and solves for
/// the camera pose in the map frame.
pub fn estimate_pose(
    frame: &Frame,
    landmarks: &[Landmark],
    intrinsics: &Intrinsics,
    params: &LocalizationParams,
) -> Result<PoseEstimate> {
    let id = frame.id();
    let candidates: Vec<&Landmark> = landmarks
        .iter()
        .filter(|l| l.frame_id.abs_diff(id) <= params.neighbor_window)
        .collect();
    let pool: Vec<Feature> = candidates.iter().map(|l| l.feature.clone()).collect();
    let matches: Vec<Match3D2D> = match_features(&frame.features, &pool, params.ratio)
        .iter()
        .map(|c| Match3D2D {
            world: candidates[c.index_j].world,
            image: c.pixel_i,
        })
        .collect();
    estimate_pose_from_matches(id, &matches, intrinsics, params)
        .map_err(|e| e.at_stage("localize", id))
}

/// Spreads a loop-closure correction over a trajectory: the pose at step
/// `k` of `L` moves by the fraction `k / L` of `closure`, applied in the
/// map frame, so the last pose is corrected in full and the first not at
/// all.
pub fn redistribute_loop_drift(trajectory: &Trajectory, closure: &RigidTransform) -> Trajectory {
    let steps = trajectory.poses.len().saturating_sub(1).max(1) as f64;
    let poses = trajectory
        .poses
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let correction = closure.fraction(k as f64 / steps);
            let world_from_camera = correction.compose(&p.camera_to_world());
            SensorPose::new(p.frame_id, p.timestamp, world_from_camera.inverse())
        })
        .collect();
    Trajectory {
        poses,
        ground_truth: trajectory.ground_truth.clone(),
    }
}
