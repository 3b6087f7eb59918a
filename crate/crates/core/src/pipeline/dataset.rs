//! On-disk dataset layout and a frame source that reads either from disk or
//! straight from the simulator.
//!
//! ```text
//! <root>/calibration.json
//! <root>/dataset.json                   metadata (kind, frame count, phase params)
//! <root>/ground_truth_trajectory.csv    world←sensor pose per frame, when known
//! <root>/frame_0000/manifest.txt        role, index and file of every image
//! <root>/frame_0000/phase_00.pgm ...    16-bit phase-shift captures
//! <root>/frame_0000/gray_00.pgm ...     16-bit Gray-code captures
//! <root>/frame_0000/gray_complement.pgm
//! <root>/frame_0000/black.pgm
//! <root>/frame_0000/white.pgm
//! <root>/frame_0000/depth_gt.pgm        camera depth in `depth_unit_mm`, 0 = no surface
//! <root>/frame_0000/pose_gt.csv         world←sensor pose of this frame
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Calibration, Point3, RigidTransform};
use crate::phase::{CaptureStack, PhaseParams};
use crate::pipeline::io::{read_sensor_poses, write_sensor_poses};
use crate::raster::Image;
use crate::simulator::{DatasetKind, DatasetSpec};

/// Ground-truth depth quantum, mm.
pub const DEPTH_UNIT_MM: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: DatasetKind,
    pub frames: usize,
    /// Frames per revolution when the trajectory revisits its start.
    pub loop_period: Option<usize>,
    pub phase: PhaseParams,
    pub noise_sigma: f64,
    pub seed: u64,
    pub depth_unit_mm: f64,
}

/// Ground truth for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    /// World←sensor.
    pub pose: RigidTransform,
    /// Surface point per camera pixel, sensor frame.
    pub points: Vec<Option<Point3>>,
}

#[derive(Debug, Clone)]
pub struct FrameData {
    pub stack: CaptureStack,
    pub truth: Option<FrameTruth>,
}

#[derive(Debug, Clone)]
enum Source {
    Disk(PathBuf),
    Synthetic(Box<DatasetSpec>),
}

/// A dataset whose frames are loaded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub calibration: Calibration,
    source: Source,
}

fn frame_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("frame_{k:04}"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn synthetic(spec: DatasetSpec) -> Self {
        let meta = DatasetMeta {
            kind: spec.kind,
            frames: spec.len(),
            loop_period: spec.loop_period,
            phase: spec.settings.phase,
            noise_sigma: spec.settings.noise_sigma,
            seed: spec.settings.seed,
            depth_unit_mm: DEPTH_UNIT_MM,
        };
        Self {
            meta,
            calibration: spec.calibration,
            source: Source::Synthetic(Box::new(spec)),
        }
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        if !root.is_dir() {
            return Err(Error::Config(format!(
                "dataset {} is not a directory",
                root.display()
            )));
        }
        let meta: DatasetMeta = read_json(&root.join("dataset.json"))?;
        let calibration = Calibration::load(root.join("calibration.json"))?;
        meta.phase.validate()?;
        Ok(Self {
            meta,
            calibration,
            source: Source::Disk(root.to_path_buf()),
        })
    }

    /// Replaces the calibration, e.g. from a separate calibration file.
    pub fn with_calibration(mut self, calibration: Calibration) -> Result<Self> {
        calibration.validate()?;
        self.calibration = calibration;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.meta.frames
    }

    pub fn is_empty(&self) -> bool {
        self.meta.frames == 0
    }

    pub fn load_frame(&self, k: usize) -> Result<FrameData> {
        if k >= self.len() {
            return Err(Error::Input(format!("frame {k} out of range")));
        }
        match &self.source {
            Source::Synthetic(spec) => {
                let (stack, truth) = spec.render_frame(k)?;
                Ok(FrameData {
                    stack,
                    truth: Some(FrameTruth {
                        pose: truth.pose,
                        points: truth.points,
                    }),
                })
            }
            Source::Disk(root) => load_frame_dir(
                &frame_dir(root, k),
                &self.calibration,
                self.meta.depth_unit_mm,
            ),
        }
    }

    /// World←sensor ground-truth poses, when every frame has one.
    pub fn ground_truth_poses(&self) -> Result<Option<Vec<RigidTransform>>> {
        match &self.source {
            Source::Synthetic(spec) => Ok(Some(spec.poses.clone())),
            Source::Disk(root) => {
                let path = root.join("ground_truth_trajectory.csv");
                if !path.exists() {
                    return Ok(None);
                }
                let rows = read_sensor_poses(&path)?;
                if rows.len() != self.len() || rows.iter().enumerate().any(|(k, (id, _))| *id != k)
                {
                    return Err(Error::Data(format!(
                        "{}: frame ids do not cover the dataset",
                        path.display()
                    )));
                }
                Ok(Some(rows.into_iter().map(|(_, t)| t).collect()))
            }
        }
    }
}

fn parse_manifest(dir: &Path) -> Result<Vec<(String, Option<usize>, String)>> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [role, index, file] = fields[..] else {
            return Err(Error::Data(format!(
                "{}:{}: expected `role index file`",
                path.display(),
                n + 1
            )));
        };
        let index = match index {
            "-" => None,
            s => Some(s.parse().map_err(|_| {
                Error::Data(format!("{}:{}: bad index {s}", path.display(), n + 1))
            })?),
        };
        out.push((role.to_string(), index, file.to_string()));
    }
    Ok(out)
}

fn load_frame_dir(dir: &Path, calibration: &Calibration, depth_unit: f64) -> Result<FrameData> {
    let entries = parse_manifest(dir)?;
    let mut phase: Vec<(usize, Image)> = Vec::new();
    let mut gray: Vec<(usize, Image)> = Vec::new();
    let (mut complement, mut black, mut white) = (None, None, None);
    let mut depth = None;
    let mut pose = None;
    for (role, index, file) in &entries {
        let path = dir.join(file);
        let indexed = |what: &str| {
            index.ok_or_else(|| {
                Error::Data(format!("{}: {what} entry needs an index", dir.display()))
            })
        };
        match role.as_str() {
            "phase" => phase.push((indexed("phase")?, Image::load(&path)?)),
            "gray" => gray.push((indexed("gray")?, Image::load(&path)?)),
            "complement" => complement = Some(Image::load(&path)?),
            "black" => black = Some(Image::load(&path)?),
            "white" => white = Some(Image::load(&path)?),
            "depth_gt" => depth = Some(Image::load_raw16(&path)?),
            "pose_gt" => pose = Some(read_sensor_poses(&path)?),
            other => {
                return Err(Error::Data(format!(
                    "{}: unknown manifest role {other}",
                    dir.display()
                )))
            }
        }
    }
    let ordered = |mut v: Vec<(usize, Image)>, what: &str| -> Result<Vec<Image>> {
        v.sort_by_key(|(i, _)| *i);
        if v.iter().enumerate().any(|(k, (i, _))| k != *i) {
            return Err(Error::Data(format!(
                "{}: {what} indices are not 0..n",
                dir.display()
            )));
        }
        Ok(v.into_iter().map(|(_, img)| img).collect())
    };
    let missing = |what: &str| Error::Data(format!("{}: manifest lacks {what}", dir.display()));
    let stack = CaptureStack {
        phase: ordered(phase, "phase")?,
        gray: ordered(gray, "gray")?,
        complement: complement.ok_or_else(|| missing("complement"))?,
        black: black.ok_or_else(|| missing("black"))?,
        white: white.ok_or_else(|| missing("white"))?,
    };
    let truth = match (depth, pose) {
        (Some((w, h, raw)), Some(pose)) => {
            if w != calibration.camera.width || h != calibration.camera.height {
                return Err(Error::Data(format!(
                    "{}: depth size differs from the camera",
                    dir.display()
                )));
            }
            let &[(_, pose)] = &pose[..] else {
                return Err(Error::Data(format!(
                    "{}: pose_gt must hold one row",
                    dir.display()
                )));
            };
            Some(FrameTruth {
                pose,
                points: depth_to_points(&raw, w, calibration, depth_unit),
            })
        }
        _ => None,
    };
    Ok(FrameData { stack, truth })
}

/// Sensor-frame surface points from quantized camera depth.
fn depth_to_points(
    raw: &[u16],
    width: usize,
    calibration: &Calibration,
    unit: f64,
) -> Vec<Option<Point3>> {
    let cam = &calibration.camera;
    let k_inv = cam.intrinsics.inverse_matrix();
    let ext = cam.extrinsics.as_transform().inverse();
    raw.iter()
        .enumerate()
        .map(|(i, &d)| {
            (d > 0).then(|| {
                let ray = k_inv * Vector3::new((i % width) as f64, (i / width) as f64, 1.0);
                ext.apply(&Point3::from(ray * (d as f64 * unit)))
            })
        })
        .collect()
}

/// Renders every frame of `spec` into `root` using the layout above.
pub fn write_dataset(spec: &DatasetSpec, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let ds = Dataset::synthetic(spec.clone());
    spec.calibration.save(root.join("calibration.json"))?;
    write_json(&root.join("dataset.json"), &ds.meta)?;
    let poses: Vec<(usize, RigidTransform)> = spec.poses.iter().copied().enumerate().collect();
    write_sensor_poses(root.join("ground_truth_trajectory.csv"), &poses)?;
    (0..spec.len())
        .into_par_iter()
        .try_for_each(|k| write_frame(spec, root, k))
}

fn write_frame(spec: &DatasetSpec, root: &Path, k: usize) -> Result<()> {
    let dir = frame_dir(root, k);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (stack, truth) = spec.render_frame(k)?;
    let mut manifest = format!("# frame {k}\n");
    let mut save = |role: &str, index: Option<usize>, file: String, img: &Image| -> Result<()> {
        img.save_pgm16(dir.join(&file))?;
        let idx = index.map_or("-".to_string(), |i| i.to_string());
        manifest.push_str(&format!("{role} {idx} {file}\n"));
        Ok(())
    };
    for (i, img) in stack.phase.iter().enumerate() {
        save("phase", Some(i), format!("phase_{i:02}.pgm"), img)?;
    }
    for (i, img) in stack.gray.iter().enumerate() {
        save("gray", Some(i), format!("gray_{i:02}.pgm"), img)?;
    }
    save(
        "complement",
        None,
        "gray_complement.pgm".into(),
        &stack.complement,
    )?;
    save("black", None, "black.pgm".into(), &stack.black)?;
    save("white", None, "white.pgm".into(), &stack.white)?;
    let depth: Vec<u16> = truth
        .depth
        .iter()
        .map(|&d| {
            if d.is_finite() && d > 0.0 {
                (d / DEPTH_UNIT_MM).round().clamp(1.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    Image::save_raw16(truth.width, truth.height, depth, dir.join("depth_gt.pgm"))?;
    manifest.push_str("depth_gt - depth_gt.pgm\n");
    write_sensor_poses(dir.join("pose_gt.csv"), &[(k, truth.pose)])?;
    manifest.push_str("pose_gt - pose_gt.csv\n");
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}
