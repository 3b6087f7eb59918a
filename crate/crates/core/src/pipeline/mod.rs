//! Batch orchestration: configuration, dataset generation, per-frame
//! reconstruction, the full mapping and localization run, and its outputs.

pub mod dataset;
pub mod io;
pub mod metrics;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{reconstruct_frame, FramePointCloud};
use crate::error::{Error, Result};
use crate::geometry::{Calibration, Point3, RigidTransform};
use crate::localization::{
    build_landmarks, estimate_pose, redistribute_loop_drift, LocalizationParams, SensorPose,
    Trajectory,
};
use crate::phase::PhaseParams;
use crate::registration::{
    build_map, detect_frames, register_pair, stitch_sequence, FeatureParams, GlobalMap,
    RegistrationParams,
};
use crate::simulator::{
    corridor_dataset, turntable_dataset, CorridorParams, DatasetSpec, RenderSettings,
    TurntableParams,
};

pub use dataset::{write_dataset, Dataset, DatasetMeta, FrameTruth};
pub use io::{
    read_ply, read_sensor_poses, read_trajectory_csv, trajectory_svg, write_ply,
    write_sensor_poses, write_trajectory_csv, PlyCloud,
};
pub use metrics::{evaluate, fit_circle, CircleFit, EvaluationReport, FrameError, LoopResidual};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Turntable,
    Corridor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub preset: Preset,
    pub turntable: TurntableParams,
    pub corridor: CorridorParams,
    /// Additive intensity noise, full-scale units.
    pub noise_sigma: f64,
    pub phase: PhaseParams,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Turntable,
            turntable: TurntableParams::default(),
            corridor: CorridorParams::default(),
            noise_sigma: 0.0,
            phase: PhaseParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    /// Overrides the dataset's own calibration file.
    pub calibration: Option<PathBuf>,
    pub output: PathBuf,
    /// Seeds simulation noise and every RANSAC stage.
    pub seed: u64,
    /// Overrides the dataset's phase parameters for decoding.
    pub phase: Option<PhaseParams>,
    pub features: FeatureParams,
    pub registration: RegistrationParams,
    pub localization: LocalizationParams,
    /// Voxel edge for the emitted map, mm; 0 keeps every point.
    pub map_voxel: f64,
    /// Re-register each revisit of the first view and spread the drift.
    pub loop_closure: bool,
    pub simulate: SimulateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            calibration: None,
            output: PathBuf::from("out"),
            seed: 0,
            phase: None,
            features: FeatureParams::default(),
            registration: RegistrationParams::default(),
            localization: LocalizationParams::default(),
            map_voxel: 1.0,
            loop_closure: true,
            simulate: SimulateConfig::default(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    /// Parameter ranges; paths are checked separately since not every
    /// command reads a dataset.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(config_error(msg)) };
        if let Some(p) = &self.phase {
            p.validate().map_err(|e| config_error(e.to_string()))?;
        }
        let r = &self.registration;
        check(
            r.ratio > 0.0 && r.ratio <= 1.0,
            "registration.ratio must lie in (0, 1]",
        )?;
        check(
            r.ransac_iterations > 0,
            "registration.ransac_iterations must be positive",
        )?;
        check(
            r.ransac_threshold >= 0.0,
            "registration.ransac_threshold must be non-negative",
        )?;
        check(
            r.min_inliers >= 3,
            "registration.min_inliers must be at least 3",
        )?;
        check(
            r.voxel_size >= 0.0,
            "registration.voxel_size must be non-negative",
        )?;
        for icp in [&r.feature_icp, &r.dense_icp] {
            check(
                icp.max_iterations > 0,
                "ICP max_iterations must be positive",
            )?;
            check(icp.tolerance > 0.0, "ICP tolerance must be positive")?;
            check(
                icp.gate_initial >= icp.gate_floor && icp.gate_floor > 0.0,
                "ICP gates must satisfy 0 < floor <= initial",
            )?;
        }
        let l = &self.localization;
        check(
            l.ratio > 0.0 && l.ratio <= 1.0,
            "localization.ratio must lie in (0, 1]",
        )?;
        check(
            l.threshold_px > 0.0,
            "localization.threshold_px must be positive",
        )?;
        check(
            l.ransac_iterations > 0,
            "localization.ransac_iterations must be positive",
        )?;
        let f = &self.features;
        check(
            f.max_features > 0 && f.patch_size >= 4,
            "features need max_features > 0 and patch_size >= 4",
        )?;
        check(
            f.surface_step > 0.0,
            "features.surface_step must be positive",
        )?;
        check(self.map_voxel >= 0.0, "map_voxel must be non-negative")?;
        let s = &self.simulate;
        check(
            s.noise_sigma >= 0.0 && s.noise_sigma.is_finite(),
            "simulate.noise_sigma must be non-negative",
        )?;
        s.phase
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        check(
            s.turntable.views_per_turn >= 3,
            "simulate.turntable.views_per_turn must be at least 3",
        )?;
        check(
            s.turntable.turns >= 1,
            "simulate.turntable.turns must be at least 1",
        )?;
        check(
            s.corridor.overlap > 0.0 && s.corridor.overlap < 1.0,
            "simulate.corridor.overlap must lie in (0, 1)",
        )?;
        check(
            s.corridor.frames >= 1,
            "simulate.corridor.frames must be at least 1",
        )?;
        if let Some(p) = &self.calibration {
            check(
                p.is_file(),
                &format!("calibration {} does not exist", p.display()),
            )?;
        }
        Ok(())
    }

    pub fn registration_params(&self) -> RegistrationParams {
        RegistrationParams {
            seed: self.seed,
            ..self.registration
        }
    }

    pub fn localization_params(&self) -> LocalizationParams {
        LocalizationParams {
            seed: self.seed,
            ..self.localization
        }
    }

    /// Opens the configured dataset, applying calibration overrides.
    pub fn open_dataset(&self) -> Result<Dataset> {
        let path = self
            .dataset
            .as_ref()
            .ok_or_else(|| config_error("no dataset path given"))?;
        if !path.exists() {
            return Err(config_error(format!(
                "dataset {} does not exist",
                path.display()
            )));
        }
        let ds = Dataset::open(path)?;
        match &self.calibration {
            Some(c) => {
                ds.with_calibration(Calibration::load(c).map_err(|e| config_error(e.to_string()))?)
            }
            None => Ok(ds),
        }
    }

    /// The synthetic dataset described by the `simulate` section.
    pub fn simulation(&self) -> Result<DatasetSpec> {
        self.validate()?;
        let s = &self.simulate;
        let settings = RenderSettings {
            phase: s.phase,
            noise_sigma: s.noise_sigma,
            seed: self.seed,
        };
        match s.preset {
            Preset::Turntable => turntable_dataset(&s.turntable, &settings),
            Preset::Corridor => corridor_dataset(&s.corridor, &settings),
        }
    }

    fn phase_for(&self, ds: &Dataset) -> PhaseParams {
        self.phase.unwrap_or(ds.meta.phase)
    }
}

/// A reconstructed frame with ground truth for each of its points.
#[derive(Debug, Clone)]
pub struct ReconstructedFrame {
    pub cloud: FramePointCloud,
    /// World←sensor pose and the true sensor-frame point per cloud point.
    pub truth: Option<(RigidTransform, Vec<Option<Point3>>)>,
}

pub fn reconstruct_one(ds: &Dataset, k: usize, phase: &PhaseParams) -> Result<ReconstructedFrame> {
    let run = || -> Result<ReconstructedFrame> {
        let data = ds.load_frame(k)?;
        let cloud = reconstruct_frame(k, &data.stack, &ds.calibration, phase)?;
        let truth = data.truth.map(|t| {
            let pts = cloud.pixels.iter().map(|&i| t.points[i as usize]).collect();
            (t.pose, pts)
        });
        Ok(ReconstructedFrame { cloud, truth })
    };
    run().map_err(|e| e.at_stage("reconstruct", k))
}

/// Reconstructs every frame in parallel; failures stay per frame.
pub fn reconstruct_dataset(ds: &Dataset, phase: &PhaseParams) -> Vec<Result<ReconstructedFrame>> {
    (0..ds.len())
        .into_par_iter()
        .map(|k| reconstruct_one(ds, k, phase))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStatus {
    pub frame_id: usize,
    pub points: usize,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructReport {
    pub frames: Vec<FrameStatus>,
}

impl ReconstructReport {
    pub fn failures(&self) -> usize {
        self.frames.iter().filter(|f| f.status == "failed").count()
    }

    pub fn warnings(&self) -> Vec<String> {
        self.frames
            .iter()
            .filter(|f| f.status != "ok")
            .map(|f| {
                format!(
                    "frame {}: {}",
                    f.frame_id,
                    f.message.as_deref().unwrap_or(&f.status)
                )
            })
            .collect()
    }
}

/// Writes `frame_XXXX.ply` and `frame_XXXX_texture.pgm` per frame plus
/// `reconstruct_report.json`. A frame that fails is recorded and skipped.
pub fn run_reconstruct(
    cfg: &PipelineConfig,
    ds: &Dataset,
    out: &Path,
) -> Result<ReconstructReport> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let phase = cfg.phase_for(ds);
    let frames: Vec<FrameStatus> = (0..ds.len())
        .into_par_iter()
        .map(|k| -> Result<FrameStatus> {
            match reconstruct_one(ds, k, &phase) {
                Ok(f) => {
                    let c = &f.cloud;
                    write_ply(
                        out.join(format!("frame_{k:04}.ply")),
                        &PlyCloud {
                            points: c.points.clone(),
                            colors: c.colors.clone(),
                            frame_ids: vec![k as u32; c.len()],
                        },
                    )?;
                    c.texture
                        .save_pgm16(out.join(format!("frame_{k:04}_texture.pgm")))?;
                    let empty = c.is_empty();
                    Ok(FrameStatus {
                        frame_id: k,
                        points: c.len(),
                        status: if empty { "empty" } else { "ok" }.into(),
                        message: empty.then(|| "no valid pixels".into()),
                    })
                }
                Err(e) => Ok(FrameStatus {
                    frame_id: k,
                    points: 0,
                    status: "failed".into(),
                    message: Some(e.to_string()),
                }),
            }
        })
        .collect::<Result<_>>()?;
    let report = ReconstructReport { frames };
    write_json(&out.join("reconstruct_report.json"), &report)?;
    if !report.frames.is_empty() && report.failures() == report.frames.len() {
        return Err(Error::Data("every frame failed to reconstruct".into()));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub frame_i: usize,
    pub frame_j: usize,
    pub matches: usize,
    pub lifted: usize,
    pub coarse_inliers: usize,
    pub inliers: usize,
    pub rms_residual_mm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub frame_id: usize,
    pub matches: usize,
    pub inliers: usize,
    pub reprojection_rms_px: f64,
}

/// Chain drift found when a revisit is registered straight to the first
/// view, before it is redistributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopClosure {
    pub anchor: usize,
    pub rotation_rad: f64,
    pub translation_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlamReport {
    pub dataset: DatasetMeta,
    pub pairs: Vec<PairSummary>,
    pub pair_rms_median_mm: f64,
    pub localization: Vec<LocalizationSummary>,
    pub loop_closures: Vec<LoopClosure>,
    pub map_points: usize,
    pub evaluation: Option<EvaluationReport>,
}

#[derive(Debug, Clone)]
pub struct SlamOutput {
    pub trajectory: Trajectory,
    /// World←sensor transform per frame, map coordinates.
    pub sensor_poses: Vec<RigidTransform>,
    pub map: GlobalMap,
    pub report: SlamReport,
    /// Wall-clock seconds per stage.
    pub timing: BTreeMap<String, f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Reconstruction, stitching, per-frame localization, optional loop drift
/// redistribution and, with ground truth, evaluation.
pub fn run_slam(cfg: &PipelineConfig, ds: &Dataset) -> Result<SlamOutput> {
    cfg.validate()?;
    if ds.len() < 2 {
        return Err(Error::Input(format!(
            "slam needs at least 2 frames, got {}",
            ds.len()
        )));
    }
    let mut timing = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timing: &mut BTreeMap<String, f64>| {
        timing.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let phase = cfg.phase_for(ds);
    let recon: Vec<ReconstructedFrame> = reconstruct_dataset(ds, &phase)
        .into_iter()
        .collect::<Result<_>>()?;
    let (clouds, truths): (Vec<_>, Vec<_>) = recon.into_iter().map(|r| (r.cloud, r.truth)).unzip();
    lap("reconstruct", &mut timing);

    let frames = detect_frames(clouds, &cfg.features);
    lap("features", &mut timing);

    let reg = cfg.registration_params();
    let stitch = stitch_sequence(&frames, &reg, 0.0)?;
    lap("stitch", &mut timing);

    let landmarks = build_landmarks(&frames, &stitch.transforms);
    let intrinsics = ds.calibration.camera.intrinsics;
    let loc = cfg.localization_params();
    let estimates = frames
        .par_iter()
        .map(|f| estimate_pose(f, &landmarks, &intrinsics, &loc))
        .collect::<Result<Vec<_>>>()?;
    let mut trajectory = Trajectory::new(estimates.iter().map(|e| e.pose).collect())?;
    let raw_trajectory = trajectory.clone();
    lap("localize", &mut timing);

    let camera_from_sensor = ds.calibration.camera.extrinsics.as_transform();
    let mut loop_closures = Vec::new();
    if let (true, Some(period)) = (cfg.loop_closure, ds.meta.loop_period) {
        let anchors: Vec<usize> = (period..frames.len()).step_by(period.max(1)).collect();
        let direct: Vec<RigidTransform> = anchors
            .par_iter()
            .map(|&a| {
                register_pair(&frames[0], &frames[a], &reg)
                    .map(|r| r.transform)
                    .map_err(|e| e.at_stage("loop closure", a))
            })
            .collect::<Result<_>>()?;
        let mut prev = 0;
        for (&a, t) in anchors.iter().zip(&direct) {
            let target = t.compose(&camera_from_sensor.inverse());
            let closure = target.compose(&trajectory.poses[a].world_to_camera);
            let (rotation_rad, translation_mm) = closure.deviation_from_identity();
            loop_closures.push(LoopClosure {
                anchor: a,
                rotation_rad,
                translation_mm,
            });
            let segment = Trajectory {
                poses: trajectory.poses[prev..=a].to_vec(),
                ground_truth: None,
            };
            let fixed = redistribute_loop_drift(&segment, &closure);
            trajectory.poses[prev..=a].copy_from_slice(&fixed.poses);
            for p in trajectory.poses[a + 1..].iter_mut() {
                *p = SensorPose::new(
                    p.frame_id,
                    p.timestamp,
                    closure.compose(&p.camera_to_world()).inverse(),
                );
            }
            prev = a;
        }
    }
    // Carry each frame's correction over to its stitched sensor pose.
    let sensor_poses: Vec<RigidTransform> = stitch
        .transforms
        .iter()
        .zip(trajectory.poses.iter().zip(&raw_trajectory.poses))
        .map(|(t, (fixed, raw))| {
            fixed
                .camera_to_world()
                .compose(&raw.world_to_camera)
                .compose(t)
        })
        .collect();
    let map = build_map(&frames, &sensor_poses, cfg.map_voxel);
    lap("loop closure and map", &mut timing);

    let evaluation = match truths
        .iter()
        .map(|t| t.as_ref())
        .collect::<Option<Vec<_>>>()
    {
        Some(truths) => {
            let truth_traj = Trajectory::new(
                truths
                    .iter()
                    .enumerate()
                    .map(|(k, (pose, _))| SensorPose::from_sensor(k, pose, &ds.calibration.camera))
                    .collect(),
            )?;
            let mut eval = evaluate(&trajectory, &truth_traj)?;
            if ds.meta.loop_period.is_some() {
                eval.circle_fit = fit_circle(&trajectory.centers());
            }
            // The map frame is frame 0's sensor frame.
            let gauge = truths[0].0.compose(&sensor_poses[0].inverse());
            eval.map_rms_mm = metrics::pointwise_rms(
                map.points
                    .iter()
                    .zip(&map.frame_ids)
                    .zip(&map.source_points)
                    .filter_map(|((p, &f), &i)| {
                        let (pose, pts) = truths[f as usize];
                        pts[i as usize].map(|q| (gauge.apply(p), pose.apply(&q)))
                    }),
            );
            trajectory.ground_truth = Some(truth_traj.poses);
            Some(eval)
        }
        None => None,
    };
    lap("evaluate", &mut timing);

    let pairs: Vec<PairSummary> = stitch
        .pairs
        .iter()
        .enumerate()
        .map(|(k, p)| PairSummary {
            frame_i: k,
            frame_j: k + 1,
            matches: p.matches,
            lifted: p.lifted,
            coarse_inliers: p.coarse.inlier_count,
            inliers: p.result.inlier_count,
            rms_residual_mm: p.result.rms_residual,
            iterations: p.result.iterations_used,
        })
        .collect();
    let report = SlamReport {
        dataset: ds.meta,
        pair_rms_median_mm: median(pairs.iter().map(|p| p.rms_residual_mm).collect()),
        pairs,
        localization: estimates
            .iter()
            .map(|e| LocalizationSummary {
                frame_id: e.pose.frame_id,
                matches: e.matches,
                inliers: e.inliers,
                reprojection_rms_px: e.reprojection_rms,
            })
            .collect(),
        loop_closures,
        map_points: map.len(),
        evaluation,
    };
    Ok(SlamOutput {
        trajectory,
        sensor_poses,
        map,
        report,
        timing,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// `map.ply`, `trajectory.csv`, `trajectory_gt.csv` (with ground truth),
/// `sensor_poses.csv`, `trajectory.svg`, `report.json` and `timing.json`. Everything except
/// the timing file is a pure function of config and data.
pub fn write_slam_outputs(out: &SlamOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ply(
        dir.join("map.ply"),
        &PlyCloud {
            points: out.map.points.clone(),
            colors: out.map.colors.clone(),
            frame_ids: out.map.frame_ids.clone(),
        },
    )?;
    write_trajectory_csv(dir.join("trajectory.csv"), &out.trajectory.poses)?;
    let chain: Vec<(usize, RigidTransform)> = out
        .trajectory
        .poses
        .iter()
        .map(|p| p.frame_id)
        .zip(out.sensor_poses.iter().copied())
        .collect();
    write_sensor_poses(dir.join("sensor_poses.csv"), &chain)?;
    let est = out.trajectory.centers();
    let svg = match &out.trajectory.ground_truth {
        Some(gt) => {
            write_trajectory_csv(dir.join("trajectory_gt.csv"), gt)?;
            let truth: Vec<Point3> = gt.iter().map(|p| p.center).collect();
            let align = metrics::align_points(&est, &truth);
            let aligned: Vec<Point3> = est.iter().map(|p| align.apply(p)).collect();
            trajectory_svg(&aligned, Some(&truth))
        }
        None => trajectory_svg(&est, None),
    };
    let path = dir.join("trajectory.svg");
    std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("report.json"), &out.report)?;
    write_json(&dir.join("timing.json"), &out.timing)
}

/// Compares two trajectory CSV files and writes `evaluation.json`.
pub fn run_evaluate(estimated: &Path, truth: &Path, out: &Path) -> Result<EvaluationReport> {
    let est = read_trajectory_csv(estimated)?;
    let gt = read_trajectory_csv(truth)?;
    let report = evaluate(&est, &gt)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("evaluation.json"), &report)?;
    Ok(report)
}
