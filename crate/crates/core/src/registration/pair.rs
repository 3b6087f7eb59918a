//! Lifting 2D matches to 3D, pairwise registration and sequential stitching.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{
    detect_surface_features, match_features, Correspondence2D, Feature, FeatureParams,
};
use super::icp::{icp_refine_with, Association, IcpParams, IcpTarget};
use super::rigid::{
    estimate_rigid_transform_inliers, Correspondence3D, RansacParams, RegistrationResult,
};
use crate::cloud::FramePointCloud;
use crate::error::{Error, Result};
use crate::geometry::{Pixel, Point3, RigidTransform};

/// A reconstructed view with its detected features.
#[derive(Debug, Clone)]
pub struct Frame {
    pub cloud: FramePointCloud,
    pub features: Vec<Feature>,
    /// Per cloud point: true when a pixel neighbor is missing or lies across
    /// a depth discontinuity.
    pub boundary: Vec<bool>,
}

impl Frame {
    pub fn new(cloud: FramePointCloud, params: &FeatureParams) -> Self {
        let features = detect_surface_features(&cloud, params);
        let boundary = boundary_mask(&cloud);
        Self {
            cloud,
            features,
            boundary,
        }
    }

    pub fn id(&self) -> usize {
        self.cloud.frame_id
    }

    /// 3D position of every feature, when liftable.
    pub fn feature_points(&self) -> Vec<Option<Point3>> {
        self.features
            .iter()
            .map(|f| lift_point(&self.cloud, f.keypoint.pixel))
            .collect()
    }
}

/// Marks cloud points on the edge of the valid region or next to a jump in
/// depth larger than ten pixel footprints.
pub fn boundary_mask(cloud: &FramePointCloud) -> Vec<bool> {
    let (w, h) = (cloud.width as isize, cloud.height as isize);
    let fx = cloud.camera.0.fixed_view::<3, 3>(0, 0).row(0).norm();
    cloud
        .pixels
        .par_iter()
        .enumerate()
        .map(|(k, &pix)| {
            let (x, y) = ((pix as isize) % w, (pix as isize) / w);
            let p = cloud.points[k];
            let depth = cloud.camera.homogeneous_depth(&p).abs()
                / cloud.camera.0.row(2).fixed_columns::<3>(0).norm();
            let limit = 10.0 * depth / fx.max(1e-12) * std::f64::consts::SQRT_2;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 0 || yy < 0 || xx >= w || yy >= h {
                        return true;
                    }
                    match cloud.pixel_index[(yy * w + xx) as usize] {
                        None => return true,
                        Some(j) => {
                            if (cloud.points[j as usize] - p).norm() > limit {
                                return true;
                            }
                        }
                    }
                }
            }
            false
        })
        .collect()
}

/// 3D point seen at a subpixel location; see [`FramePointCloud::lift`].
pub fn lift_point(cloud: &FramePointCloud, pixel: Pixel) -> Option<Point3> {
    cloud.lift(pixel)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LiftResult {
    pub correspondences: Vec<Correspondence3D>,
    /// Index of the 2D match behind each correspondence.
    pub match_indices: Vec<usize>,
    pub dropped: usize,
}

pub fn lift_correspondences(
    matches: &[Correspondence2D],
    cloud_i: &FramePointCloud,
    cloud_j: &FramePointCloud,
) -> LiftResult {
    let mut out = LiftResult::default();
    for (k, m) in matches.iter().enumerate() {
        match (
            lift_point(cloud_i, m.pixel_i),
            lift_point(cloud_j, m.pixel_j),
        ) {
            (Some(point_i), Some(point_j)) => {
                out.correspondences
                    .push(Correspondence3D { point_i, point_j });
                out.match_indices.push(k);
            }
            _ => out.dropped += 1,
        }
    }
    out
}

/// Keeps one real sample per occupied voxel: the one closest to the voxel
/// centroid. Output order follows first occupancy.
pub fn voxel_downsample(points: &[Point3], voxel: f64) -> Vec<usize> {
    if !(voxel > 0.0) {
        return (0..points.len()).collect();
    }
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        let slot = *slots.entry(key).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[slot].push(i);
    }
    members
        .iter()
        .map(|m| {
            let c = m
                .iter()
                .fold(Vector3::zeros(), |a, &i| a + points[i].coords)
                / m.len() as f64;
            *m.iter()
                .min_by(|&&a, &&b| {
                    (points[a].coords - c)
                        .norm_squared()
                        .total_cmp(&(points[b].coords - c).norm_squared())
                })
                .expect("non-empty voxel")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationParams {
    pub ratio: f64,
    pub ransac_iterations: usize,
    /// Fixed RANSAC inlier distance in mm; 0 derives it as three times the
    /// larger of the estimated cloud noise and the point spacing.
    pub ransac_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
    pub feature_icp: IcpParams,
    /// Final pass on voxel-subsampled full clouds.
    pub dense: bool,
    pub dense_icp: IcpParams,
    /// Surface-fit neighborhood used instead of the dense stage's own when
    /// the target's estimated noise exceeds 1% of its point spacing. These
    /// larger patches approximate rather than interpolate, averaging noise
    /// instead of fitting it.
    pub noisy_surface_neighbors: usize,
    pub voxel_size: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            ransac_iterations: 1000,
            ransac_threshold: 0.0,
            min_inliers: 8,
            seed: 0,
            feature_icp: IcpParams {
                min_points: 6,
                ..Default::default()
            },
            dense: true,
            dense_icp: IcpParams {
                association: Association::PointToSurface,
                ..Default::default()
            },
            noisy_surface_neighbors: 60,
            voxel_size: 2.0,
        }
    }
}

/// Outcome of each stage of a pairwise registration.
#[derive(Debug, Clone, PartialEq)]
pub struct PairReport {
    pub matches: usize,
    pub lifted: usize,
    pub dropped: usize,
    pub coarse: RegistrationResult,
    pub feature_refined: Option<RegistrationResult>,
    pub result: RegistrationResult,
}

/// Transform mapping frame `j` into frame `i`.
pub fn register_pair(
    frame_i: &Frame,
    frame_j: &Frame,
    params: &RegistrationParams,
) -> Result<RegistrationResult> {
    register_pair_detailed(frame_i, frame_j, params).map(|r| r.result)
}

pub fn register_pair_detailed(
    frame_i: &Frame,
    frame_j: &Frame,
    params: &RegistrationParams,
) -> Result<PairReport> {
    let id = frame_j.id();
    let matches = match_features(&frame_i.features, &frame_j.features, params.ratio);
    if matches.len() < params.min_inliers.max(3) {
        return Err(Error::InsufficientOverlap {
            found: matches.len(),
            required: params.min_inliers.max(3),
        }
        .at_stage("match", id));
    }
    let lifted = lift_correspondences(&matches, &frame_i.cloud, &frame_j.cloud);

    let mut target = IcpTarget::with_exclusions(&frame_i.cloud.points, Some(&frame_i.boundary))
        .with_surface_neighbors(params.dense_icp.surface_neighbors);
    let noisy = target.noise_estimate() > 0.01 * target.spacing();
    let threshold = if params.ransac_threshold > 0.0 {
        params.ransac_threshold
    } else {
        3.0 * target.noise_estimate().max(target.spacing())
    };
    let ransac = RansacParams {
        iterations: params.ransac_iterations,
        threshold,
        min_inliers: 3,
        seed: params.seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    };
    let (coarse, inliers) = estimate_rigid_transform_inliers(&lifted.correspondences, &ransac)
        .map_err(|e| match e {
            Error::DegenerateCorrespondence(_) => Error::InsufficientOverlap {
                found: lifted.correspondences.len(),
                required: params.min_inliers,
            },
            other => other,
        })
        .map_err(|e| e.at_stage("coarse", id))?;
    if coarse.inlier_count < params.min_inliers {
        return Err(Error::InsufficientOverlap {
            found: coarse.inlier_count,
            required: params.min_inliers,
        }
        .at_stage("coarse", id));
    }

    let feature_source: Vec<Point3> = inliers
        .iter()
        .map(|&k| lifted.correspondences[k].point_j)
        .collect();
    let feature_refined = icp_refine_with(
        &feature_source,
        &target,
        &coarse.transform,
        &params.feature_icp,
    )
    .ok()
    .map(|(r, _)| r);
    let mut current = feature_refined.clone().unwrap_or_else(|| coarse.clone());

    if params.dense {
        if noisy {
            target = target.with_surface_fit(params.noisy_surface_neighbors, false);
        }
        let keep = voxel_downsample(&frame_j.cloud.points, params.voxel_size);
        let source: Vec<Point3> = keep.iter().map(|&k| frame_j.cloud.points[k]).collect();
        let (dense, _) = icp_refine_with(&source, &target, &current.transform, &params.dense_icp)
            .map_err(|e| e.at_stage("icp", id))?;
        current = dense;
    }
    Ok(PairReport {
        matches: matches.len(),
        lifted: lifted.correspondences.len(),
        dropped: lifted.dropped,
        coarse,
        feature_refined,
        result: current,
    })
}

/// Concatenated map with per-point provenance, in frame-0 coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalMap {
    pub points: Vec<Point3>,
    pub colors: Vec<[u8; 3]>,
    pub frame_ids: Vec<u32>,
    /// Index of each point within its frame's cloud.
    pub source_points: Vec<u32>,
}

impl GlobalMap {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Transforms every frame into frame-0 coordinates. A positive `voxel`
/// subsamples each frame before merging.
pub fn build_map(frames: &[Frame], transforms: &[RigidTransform], voxel: f64) -> GlobalMap {
    let mut map = GlobalMap::default();
    for (frame, t) in frames.iter().zip(transforms) {
        let cloud = &frame.cloud;
        for k in voxel_downsample(&cloud.points, voxel) {
            map.points.push(t.apply(&cloud.points[k]));
            map.colors.push(cloud.colors[k]);
            map.frame_ids.push(cloud.frame_id as u32);
            map.source_points.push(k as u32);
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchResult {
    /// Frame-0←frame-k transform per frame.
    pub transforms: Vec<RigidTransform>,
    /// Registration of frame k onto frame k-1, for k ≥ 1.
    pub pairs: Vec<PairReport>,
    pub map: GlobalMap,
}

/// Registers every frame to its predecessor and chains the results.
pub fn stitch_sequence(
    frames: &[Frame],
    params: &RegistrationParams,
    map_voxel: f64,
) -> Result<StitchResult> {
    if frames.len() < 2 {
        return Err(Error::Input(format!(
            "stitching needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let pairs: Vec<PairReport> = (1..frames.len())
        .into_par_iter()
        .map(|k| register_pair_detailed(&frames[k - 1], &frames[k], params))
        .collect::<Result<_>>()?;
    let transforms = chain_transforms(pairs.iter().map(|p| &p.result.transform));
    let map = build_map(frames, &transforms, map_voxel);
    Ok(StitchResult {
        transforms,
        pairs,
        map,
    })
}

/// `T_{0←k} = T_{0←k-1} ∘ T_{k-1←k}`, starting from the identity.
pub fn chain_transforms<'a>(
    steps: impl IntoIterator<Item = &'a RigidTransform>,
) -> Vec<RigidTransform> {
    let mut out = vec![RigidTransform::identity()];
    for step in steps {
        let last = *out.last().expect("non-empty");
        out.push(last.compose(step));
    }
    out
}

pub fn detect_frames(clouds: Vec<FramePointCloud>, params: &FeatureParams) -> Vec<Frame> {
    clouds
        .into_par_iter()
        .map(|c| Frame::new(c, params))
        .collect()
}
