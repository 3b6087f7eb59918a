//! Synthetic structured-light captures of analytic scenes.
//!
//! A scene is a set of planes, spheres and axis-aligned boxes with
//! procedural albedo. Rendering casts one ray per camera pixel, checks that
//! the hit is visible from the projector, and evaluates every projected
//! pattern at the exact (continuous) projector coordinate of the hit.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    project, Calibration, DeviceCalibration, Extrinsics, Pixel, Point3, RigidTransform,
};
use crate::phase::{
    complementary_bit, fringe_intensity, gray_bit_count, gray_pattern_bit, period_count,
    phase_shift, CaptureStack, PhaseParams,
};
use crate::raster::Image;

const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Uniform(f64),
    /// 3D checker of cube size `size` alternating between two albedos.
    Checker {
        size: f64,
        low: f64,
        high: f64,
    },
    /// Sum of randomly oriented plane waves squashed through `tanh`;
    /// aperiodic, so image patches stay distinctive.
    Procedural {
        waves: Vec<(Vector3<f64>, f64)>,
        mean: f64,
        contrast: f64,
    },
}

impl Texture {
    /// Procedural texture with wavelengths in `[scale, 3 scale]` mm.
    pub fn procedural(seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..10)
            .map(|_| {
                let dir = loop {
                    let v = Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    let n = v.norm();
                    if n > 0.2 && n <= 1.0 {
                        break v / n;
                    }
                };
                let wavelength = scale * rng.random_range(1.0..3.0);
                (
                    dir * (std::f64::consts::TAU / wavelength),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Texture::Procedural {
            waves,
            mean: 0.575,
            contrast: 0.3,
        }
    }

    pub fn albedo(&self, p: &Point3) -> f64 {
        match self {
            Texture::Uniform(a) => *a,
            Texture::Checker { size, low, high } => {
                let parity = (p.x / size).floor() + (p.y / size).floor() + (p.z / size).floor();
                if parity.rem_euclid(2.0) < 0.5 {
                    *low
                } else {
                    *high
                }
            }
            Texture::Procedural {
                waves,
                mean,
                contrast,
            } => {
                let s: f64 = waves
                    .iter()
                    .map(|(k, phi)| (k.dot(&p.coords) + phi).sin())
                    .sum();
                let s = s / (waves.len() as f64 / 2.0).sqrt();
                mean + contrast * (1.5 * s).tanh()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Plane { point: Point3, normal: Vector3<f64> },
    Sphere { center: Point3, radius: f64 },
    Cuboid { min: Point3, max: Point3 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Point3,
    /// Unit surface normal facing the ray origin.
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

impl Shape {
    pub fn validate(&self) -> Result<()> {
        match self {
            Shape::Plane { normal, .. } => {
                if (normal.norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::Input("plane normal must be unit length".into()));
                }
            }
            Shape::Sphere { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(Error::Input("sphere radius must be positive".into()));
                }
            }
            Shape::Cuboid { min, max } => {
                if !(min.x < max.x && min.y < max.y && min.z < max.z) {
                    return Err(Error::Input(
                        "box must have positive extent on every axis".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Smallest `t > 0` where `origin + t dir` meets the surface; `dir` is unit.
    pub fn intersect(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Shape::Plane { point, normal } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = normal.dot(&(point - origin)) / denom;
                (t > HIT_EPS).then(|| (t, if denom > 0.0 { -normal } else { *normal }))
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // Numerically stable pair of roots.
                let q = if b > 0.0 { -b - sq } else { -b + sq };
                let (mut t0, mut t1) = (q, if q != 0.0 { c / q } else { 0.0 });
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                let t = if t0 > HIT_EPS {
                    t0
                } else if t1 > HIT_EPS {
                    t1
                } else {
                    return None;
                };
                let n = (origin + dir * t - center) / *radius;
                Some((t, if n.dot(dir) > 0.0 { -n } else { n }))
            }
            Shape::Cuboid { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut near_axis = 0;
                let mut far_axis = 0;
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (min[a] - origin[a]) / dir[a];
                    let t2 = (max[a] - origin[a]) / dir[a];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if lo > t_near {
                        t_near = lo;
                        near_axis = a;
                    }
                    if hi < t_far {
                        t_far = hi;
                        far_axis = a;
                    }
                }
                if t_near > t_far || t_far <= HIT_EPS {
                    return None;
                }
                let (t, axis) = if t_near > HIT_EPS {
                    (t_near, near_axis)
                } else {
                    (t_far, far_axis)
                };
                let mut n = Vector3::zeros();
                n[axis] = -dir[axis].signum();
                Some((t, n))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, shape: Shape, texture: Texture) -> Self {
        self.primitives.push(Primitive { shape, texture });
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.primitives.iter().try_for_each(|p| p.shape.validate())
    }

    pub fn intersect(&self, origin: &Point3, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = prim.shape.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: origin + dir * t,
                        normal,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    pub fn albedo(&self, hit: &Hit) -> f64 {
        self.primitives[hit.primitive].texture.albedo(&hit.point)
    }
}

/// Device calibration re-expressed in world coordinates for a sensor at
/// `pose` (world←sensor).
pub fn posed_device(device: &DeviceCalibration, pose: &RigidTransform) -> DeviceCalibration {
    let world_to_sensor = pose.inverse();
    let ext = device.extrinsics.as_transform().compose(&world_to_sensor);
    DeviceCalibration {
        extrinsics: Extrinsics::new(ext.rotation, ext.translation),
        ..*device
    }
}

/// Depth and albedo per camera pixel from a single ray cast.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRender {
    pub width: usize,
    pub height: usize,
    /// Depth along the optical axis in mm; NaN on misses.
    pub depth: Vec<f64>,
    pub albedo: Vec<f64>,
    pub hits: Vec<Option<Hit>>,
}

/// Casts one ray per pixel center of `camera` (extrinsics in world frame).
pub fn raycast_depth(scene: &Scene, camera: &DeviceCalibration) -> DepthRender {
    let origin = camera.center();
    let (w, h) = (camera.width, camera.height);
    let hits: Vec<Option<Hit>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let dir = camera.ray_direction(Pixel::new((i % w) as f64, (i / w) as f64));
            scene.intersect(&origin, &dir)
        })
        .collect();
    let depth = hits
        .iter()
        .map(|hit| hit.map_or(f64::NAN, |hit| camera.depth(&hit.point)))
        .collect();
    let albedo = hits
        .iter()
        .map(|hit| hit.map_or(0.0, |hit| scene.albedo(&hit)))
        .collect();
    DepthRender {
        width: w,
        height: h,
        depth,
        albedo,
        hits,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub phase: PhaseParams,
    /// Standard deviation of additive Gaussian noise, in full-scale units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            phase: PhaseParams::default(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub width: usize,
    pub height: usize,
    /// Camera depth in mm; NaN where the pixel sees nothing.
    pub depth: Vec<f64>,
    /// Surface point per pixel in the sensor frame.
    pub points: Vec<Option<Point3>>,
    /// Pixels whose surface point receives projector light.
    pub lit: Vec<bool>,
    /// World←sensor pose.
    pub pose: RigidTransform,
    pub texture: Image,
}

impl GroundTruthFrame {
    pub fn world_points(&self) -> Vec<Option<Point3>> {
        self.points
            .iter()
            .map(|p| p.map(|p| self.pose.apply(&p)))
            .collect()
    }
}

/// Renders the full pattern stack seen by the camera with the sensor at
/// `pose`. Noise is drawn from a stream seeded by `settings.seed` and `stream`.
pub fn render_capture_stack(
    scene: &Scene,
    calibration: &Calibration,
    pose: &RigidTransform,
    settings: &RenderSettings,
    stream: u64,
) -> Result<(CaptureStack, GroundTruthFrame)> {
    calibration.validate()?;
    if calibration.baseline() < 1e-9 {
        return Err(Error::Config(
            "camera and projector centers coincide (zero baseline)".into(),
        ));
    }
    settings.phase.validate()?;
    scene.validate()?;
    if !(settings.noise_sigma >= 0.0) {
        return Err(Error::Config("noise sigma must be non-negative".into()));
    }

    let camera = posed_device(&calibration.camera, pose);
    let projector = posed_device(&calibration.projector, pose);
    let projector_matrix = projector.projection()?;
    let proj_center = projector.center();
    let render = raycast_depth(scene, &camera);
    let cam_center = camera.center();
    let to_sensor = pose.inverse();

    // Continuous projector column of every lit pixel.
    let lit_coord: Vec<Option<f64>> = render
        .hits
        .par_iter()
        .map(|hit| {
            let hit = hit.as_ref()?;
            let to_proj = proj_center - hit.point;
            let dist = to_proj.norm();
            // The normal faces the camera; the projector must be on the same side.
            if hit.normal.dot(&to_proj) <= 0.0 || hit.normal.dot(&(cam_center - hit.point)) <= 0.0 {
                return None;
            }
            let dir = -to_proj / dist;
            let blocker = scene.intersect(&proj_center, &dir)?;
            if blocker.t < dist * (1.0 - 1e-9) - 1e-6 {
                return None;
            }
            let px = project(&projector_matrix, &hit.point).ok()?;
            if projector.depth(&hit.point) <= 0.0
                || px.u < 0.0
                || px.v < 0.0
                || px.u >= calibration.projector.width as f64
                || px.v >= calibration.projector.height as f64
            {
                return None;
            }
            Some(px.u)
        })
        .collect();

    let phase = &settings.phase;
    let (w, h) = (render.width, render.height);
    let bits = gray_bit_count(period_count(calibration.projector.width, phase.wavelength));
    let pattern = |f: &dyn Fn(f64) -> f64| Image {
        width: w,
        height: h,
        data: lit_coord
            .iter()
            .zip(&render.albedo)
            .map(|(c, a)| c.map_or(0.0, |c| a * f(c)))
            .collect(),
    };

    let mut phase_images: Vec<Image> = (0..phase.steps)
        .map(|k| {
            let d = phase_shift(k, phase.steps);
            pattern(&|c| {
                fringe_intensity(c, phase.wavelength, phase.background, phase.amplitude, d)
            })
        })
        .collect();
    let mut gray: Vec<Image> = (0..bits)
        .map(|m| pattern(&|c| gray_pattern_bit(c, phase.wavelength, bits, m) as u8 as f64))
        .collect();
    let mut complement = pattern(&|c| complementary_bit(c, phase.wavelength) as u8 as f64);
    let mut black = Image::new(w, h);
    let clean_white = pattern(&|_| 1.0);
    let mut white = clean_white.clone();

    if settings.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(stream);
        let normal = Normal::new(0.0, settings.noise_sigma).expect("finite sigma");
        let images = phase_images.iter_mut().chain(gray.iter_mut()).chain([
            &mut complement,
            &mut black,
            &mut white,
        ]);
        for img in images {
            for v in img.data.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }

    let points = render
        .hits
        .iter()
        .map(|hit| hit.map(|hit| to_sensor.apply(&hit.point)))
        .collect();
    let truth = GroundTruthFrame {
        width: w,
        height: h,
        depth: render.depth,
        points,
        lit: lit_coord.iter().map(Option::is_some).collect(),
        pose: *pose,
        texture: clean_white,
    };
    let stack = CaptureStack {
        phase: phase_images,
        gray,
        complement,
        black,
        white,
    };
    Ok((stack, truth))
}

/// World←sensor rotation for a camera at `eye` looking at `target`, with the
/// image y axis pointing as close to world +y as possible.
pub fn look_at(eye: &Point3, target: &Point3) -> RigidTransform {
    let z = (target - eye).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    RigidTransform::new(Matrix3::from_columns(&[x, y, z]), eye.coords)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Turntable,
    Corridor,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TurntableParams {
    pub views_per_turn: usize,
    pub turns: usize,
    /// Distance from the sensor to the turntable axis, mm.
    pub radius: f64,
    /// Downward viewing angle, degrees.
    pub elevation_deg: f64,
}

impl Default for TurntableParams {
    fn default() -> Self {
        Self {
            views_per_turn: 13,
            turns: 3,
            radius: 470.0,
            elevation_deg: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorridorParams {
    pub frames: usize,
    pub overlap: f64,
    /// Distance from the sensor to the wall, mm.
    pub wall_distance: f64,
    /// Length of textured wall with relief; 0 sizes it to the trajectory.
    pub scene_length: f64,
}

impl Default for CorridorParams {
    fn default() -> Self {
        Self {
            frames: 20,
            overlap: 1.0 / 3.0,
            wall_distance: 470.0,
            scene_length: 0.0,
        }
    }
}

/// Everything needed to render a dataset frame by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub scene: Scene,
    pub calibration: Calibration,
    pub settings: RenderSettings,
    /// World←sensor pose per frame.
    pub poses: Vec<RigidTransform>,
    /// Frame count per loop, when the trajectory revisits its start.
    pub loop_period: Option<usize>,
}

impl DatasetSpec {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn render_frame(&self, k: usize) -> Result<(CaptureStack, GroundTruthFrame)> {
        let pose = self
            .poses
            .get(k)
            .ok_or_else(|| Error::Input(format!("frame {k} out of range")))?;
        render_capture_stack(
            &self.scene,
            &self.calibration,
            pose,
            &self.settings,
            k as u64,
        )
    }
}

/// Objects on a square turntable platter centered at the world origin; the
/// platter top is y = 80 (image y points down).
pub fn turntable_scene() -> Scene {
    Scene::new()
        .with(
            Shape::Cuboid {
                min: Point3::new(-190.0, 80.0, -190.0),
                max: Point3::new(190.0, 100.0, 190.0),
            },
            Texture::procedural(11, 9.0),
        )
        .with(
            Shape::Cuboid {
                min: Point3::new(-95.0, -25.0, -55.0),
                max: Point3::new(-15.0, 80.0, 25.0),
            },
            Texture::procedural(12, 7.0),
        )
        .with(
            Shape::Sphere {
                center: Point3::new(50.0, 35.0, -25.0),
                radius: 45.0,
            },
            Texture::procedural(13, 6.0),
        )
        .with(
            Shape::Cuboid {
                min: Point3::new(15.0, 45.0, 35.0),
                max: Point3::new(95.0, 80.0, 95.0),
            },
            Texture::procedural(14, 7.0),
        )
        .with(
            Shape::Sphere {
                center: Point3::new(-45.0, 58.0, 70.0),
                radius: 22.0,
            },
            Texture::procedural(15, 5.0),
        )
}

/// Sensor orbit around the world y axis: pose k is pose 0 rotated by
/// `2πk / views_per_turn`.
pub fn turntable_poses(params: &TurntableParams) -> Result<Vec<RigidTransform>> {
    if params.views_per_turn < 3 {
        return Err(Error::Config(format!(
            "need at least 3 views per turn, got {}",
            params.views_per_turn
        )));
    }
    if params.turns == 0 || !(params.radius > 0.0) {
        return Err(Error::Config(
            "turntable needs at least one turn and a positive radius".into(),
        ));
    }
    let e = params.elevation_deg.to_radians();
    let eye = Point3::new(0.0, -params.radius * e.sin(), -params.radius * e.cos());
    let pose0 = look_at(&eye, &Point3::origin());
    Ok((0..params.views_per_turn * params.turns)
        .map(|k| {
            let step = k % params.views_per_turn;
            let angle = std::f64::consts::TAU * step as f64 / params.views_per_turn as f64;
            RigidTransform::from_axis_angle(&Vector3::y(), angle, Vector3::zeros()).compose(&pose0)
        })
        .collect())
}

pub fn turntable_dataset(
    params: &TurntableParams,
    settings: &RenderSettings,
) -> Result<DatasetSpec> {
    Ok(DatasetSpec {
        kind: DatasetKind::Turntable,
        scene: turntable_scene(),
        calibration: Calibration::desk_scale(params.radius),
        settings: *settings,
        poses: turntable_poses(params)?,
        loop_period: Some(params.views_per_turn),
    })
}

/// Width of the camera footprint on a fronto-parallel plane at `distance`.
pub fn footprint_width(calibration: &Calibration, distance: f64) -> f64 {
    distance * calibration.camera.width as f64 / calibration.camera.intrinsics.fx
}

/// Sensor translation between consecutive corridor frames.
pub fn corridor_step(calibration: &Calibration, params: &CorridorParams) -> f64 {
    (1.0 - params.overlap) * footprint_width(calibration, params.wall_distance)
}

/// Textured wall at z = `wall_distance` and a floor, with relief objects
/// spread along x so every overlap region contains 3D structure.
pub fn corridor_scene(params: &CorridorParams, length: f64) -> Scene {
    let d = params.wall_distance;
    let mut scene = Scene::new()
        .with(
            Shape::Plane {
                point: Point3::new(0.0, 0.0, d),
                normal: -Vector3::z(),
            },
            Texture::procedural(21, 10.0),
        )
        .with(
            Shape::Plane {
                point: Point3::new(0.0, 110.0, 0.0),
                normal: -Vector3::y(),
            },
            Texture::procedural(22, 10.0),
        );
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let spacing = 55.0;
    let start = -0.6 * footprint_width(&Calibration::desk_scale(d), d);
    let count = ((length - 2.0 * start) / spacing).ceil().max(1.0) as usize;
    for i in 0..count {
        let x = start + i as f64 * spacing + rng.random_range(-12.0..12.0);
        let y = rng.random_range(-100.0..80.0);
        let texture = Texture::procedural(100 + i as u64, rng.random_range(4.0..8.0));
        let shape = if i % 2 == 0 {
            let r = rng.random_range(14.0..26.0);
            Shape::Sphere {
                center: Point3::new(x, y, d - rng.random_range(0.2..0.7) * r),
                radius: r,
            }
        } else {
            let sx = rng.random_range(15.0..35.0);
            let sy = rng.random_range(15.0..35.0);
            let depth = rng.random_range(8.0..30.0);
            Shape::Cuboid {
                min: Point3::new(x - sx / 2.0, y - sy / 2.0, d - depth),
                max: Point3::new(x + sx / 2.0, y + sy / 2.0, d + 1.0),
            }
        };
        scene = scene.with(shape, texture);
    }
    scene
}

pub fn corridor_dataset(params: &CorridorParams, settings: &RenderSettings) -> Result<DatasetSpec> {
    if !(params.overlap > 0.0 && params.overlap < 1.0) {
        return Err(Error::Config(format!(
            "overlap must lie in (0, 1), got {}",
            params.overlap
        )));
    }
    if params.frames == 0 || !(params.wall_distance > 0.0) {
        return Err(Error::Config(
            "corridor needs frames and a positive wall distance".into(),
        ));
    }
    let calibration = Calibration::desk_scale(params.wall_distance);
    let step = corridor_step(&calibration, params);
    let needed = step * (params.frames - 1) as f64;
    let length = if params.scene_length > 0.0 {
        params.scene_length
    } else {
        needed
    };
    let poses = (0..params.frames)
        .map(|k| RigidTransform::new(Matrix3::identity(), Vector3::new(k as f64 * step, 0.0, 0.0)))
        .collect();
    Ok(DatasetSpec {
        kind: DatasetKind::Corridor,
        scene: corridor_scene(params, length),
        calibration,
        settings: *settings,
        poses,
        loop_period: None,
    })
}

/// A plane and a sphere in front of the sensor; the basic front-end check.
pub fn plane_sphere_scene() -> Scene {
    Scene::new()
        .with(
            Shape::Plane {
                point: Point3::new(0.0, 0.0, 520.0),
                normal: Vector3::new(0.1, -0.05, -1.0).normalize(),
            },
            Texture::procedural(31, 8.0),
        )
        .with(
            Shape::Sphere {
                center: Point3::new(-20.0, 10.0, 450.0),
                radius: 70.0,
            },
            Texture::procedural(32, 6.0),
        )
}
