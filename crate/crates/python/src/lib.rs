//! Python bindings: calibration, projection and triangulation, phase
//! retrieval, rigid alignment, DLT localization and the batch pipeline.
//! Points are `(x, y, z)` tuples and matrices nested row lists.

use std::path::PathBuf;

use fringe_slam::geometry::{self, Intrinsics, Pixel, Point3, ProjectionMatrix};
use fringe_slam::localization::{self, Match3D2D};
use fringe_slam::pipeline::{self, Dataset, PipelineConfig};
use fringe_slam::registration::{self, Correspondence3D, RansacParams};
use fringe_slam::{phase, Error, ErrorKind};
use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Vec3 = (f64, f64, f64);
type Rows3 = [[f64; 3]; 3];
type Rows34 = [[f64; 4]; 3];

fn to_py(e: Error) -> PyErr {
    match e.kind() {
        ErrorKind::Config => PyValueError::new_err(e.to_string()),
        ErrorKind::Data => PyIOError::new_err(e.to_string()),
        ErrorKind::Algorithm => PyRuntimeError::new_err(e.to_string()),
    }
}

fn point(p: Vec3) -> Point3 {
    Point3::new(p.0, p.1, p.2)
}

fn tuple(p: &Point3) -> Vec3 {
    (p.x, p.y, p.z)
}

fn mat3(m: &Matrix3<f64>) -> Rows3 {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

fn from_rows3(rows: Rows3) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| rows[r][c])
}

fn projection(rows: Rows34) -> ProjectionMatrix {
    ProjectionMatrix::from_vector(&rows.concat())
}

fn rows34(p: &ProjectionMatrix) -> Rows34 {
    std::array::from_fn(|r| std::array::from_fn(|c| p.0[(r, c)]))
}

/// Rigid motion `x -> R x + T`, millimetres.
#[pyclass(name = "RigidTransform", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyRigidTransform(geometry::RigidTransform);

#[pymethods]
impl PyRigidTransform {
    #[new]
    #[pyo3(signature = (rotation=None, translation=(0.0, 0.0, 0.0)))]
    fn new(rotation: Option<Rows3>, translation: Vec3) -> PyResult<Self> {
        let r = rotation.map(from_rows3).unwrap_or_else(Matrix3::identity);
        let t = geometry::RigidTransform::new(
            r,
            Vector3::new(translation.0, translation.1, translation.2),
        );
        t.validate().map_err(to_py)?;
        Ok(Self(t))
    }

    #[staticmethod]
    fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        Self(geometry::RigidTransform::from_axis_angle(
            &Vector3::new(axis.0, axis.1, axis.2),
            angle,
            Vector3::new(translation.0, translation.1, translation.2),
        ))
    }

    #[getter]
    fn rotation(&self) -> Rows3 {
        mat3(&self.0.rotation)
    }

    #[getter]
    fn translation(&self) -> Vec3 {
        let t = self.0.translation;
        (t.x, t.y, t.z)
    }

    fn apply(&self, p: Vec3) -> Vec3 {
        tuple(&self.0.apply(&point(p)))
    }

    fn compose(&self, other: &PyRigidTransform) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn rotation_angle(&self) -> f64 {
        self.0.rotation_angle()
    }

    /// `(rotation angle rad, translation norm mm)`.
    fn deviation_from_identity(&self) -> (f64, f64) {
        self.0.deviation_from_identity()
    }

    fn __repr__(&self) -> String {
        let t = self.0.translation;
        format!(
            "RigidTransform(angle={:.6e} rad, translation=({:.6}, {:.6}, {:.6}))",
            self.0.rotation_angle(),
            t.x,
            t.y,
            t.z
        )
    }
}

/// Calibrated camera/projector pair.
#[pyclass(name = "Calibration", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyCalibration(geometry::Calibration);

#[pymethods]
impl PyCalibration {
    #[staticmethod]
    #[pyo3(signature = (working_distance=470.0))]
    fn desk_scale(working_distance: f64) -> Self {
        Self(geometry::Calibration::desk_scale(working_distance))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let c: geometry::Calibration =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        c.validate().map_err(to_py)?;
        Ok(Self(c))
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("calibration serializes")
    }

    fn camera_matrix(&self) -> PyResult<Rows34> {
        self.0.camera_matrix().map(|p| rows34(&p)).map_err(to_py)
    }

    fn projector_matrix(&self) -> PyResult<Rows34> {
        self.0.projector_matrix().map(|p| rows34(&p)).map_err(to_py)
    }

    /// Camera intrinsics `(fx, fy, u0, v0)`.
    fn camera_intrinsics(&self) -> (f64, f64, f64, f64) {
        let k = self.0.camera.intrinsics;
        (k.fx, k.fy, k.u0, k.v0)
    }

    fn baseline(&self) -> f64 {
        self.0.baseline()
    }

    /// World point seen at camera `pixel` on projector column `u_p`.
    fn triangulate(&self, pixel: (f64, f64), u_p: f64) -> PyResult<Vec3> {
        let cam = self.0.camera_matrix().map_err(to_py)?;
        let proj = self.0.projector_matrix().map_err(to_py)?;
        geometry::triangulate(
            Pixel::new(pixel.0, pixel.1),
            u_p,
            &cam,
            &proj,
            geometry::DEFAULT_CONDITION_BOUND,
        )
        .map(|p| tuple(&p))
        .map_err(to_py)
    }
}

#[pyfunction]
fn project(matrix: Rows34, p: Vec3) -> PyResult<(f64, f64)> {
    geometry::project(&projection(matrix), &point(p))
        .map(|px| (px.u, px.v))
        .map_err(to_py)
}

/// Wrapped phase and modulation from equally shifted samples.
#[pyfunction]
fn retrieve_phase(samples: Vec<f64>) -> PyResult<(f64, f64)> {
    let n = samples.len();
    if n < 3 {
        return Err(to_py(Error::InsufficientSteps(n)));
    }
    Ok(phase::retrieve_phase(
        samples
            .iter()
            .enumerate()
            .map(|(k, &v)| (v, phase::phase_shift(k, n))),
    ))
}

#[pyfunction]
fn gray_encode(k: u32) -> u32 {
    phase::gray_encode(k)
}

#[pyfunction]
fn gray_decode(g: u32) -> u32 {
    phase::gray_decode(g)
}

fn pairs(points_i: &[Vec3], points_j: &[Vec3]) -> PyResult<Vec<Correspondence3D>> {
    if points_i.len() != points_j.len() {
        return Err(PyValueError::new_err("point lists differ in length"));
    }
    Ok(points_i
        .iter()
        .zip(points_j)
        .map(|(a, b)| Correspondence3D {
            point_i: point(*a),
            point_j: point(*b),
        })
        .collect())
}

/// Least-squares rigid transform taking `points_j` onto `points_i`.
#[pyfunction]
fn kabsch(points_i: Vec<Vec3>, points_j: Vec<Vec3>) -> PyResult<PyRigidTransform> {
    registration::kabsch(&pairs(&points_i, &points_j)?)
        .map(PyRigidTransform)
        .map_err(to_py)
}

/// RANSAC rigid fit; returns the transform and inlier indices.
#[pyfunction]
#[pyo3(signature = (points_i, points_j, threshold=3.0, iterations=1000, seed=0))]
fn estimate_rigid_transform(
    points_i: Vec<Vec3>,
    points_j: Vec<Vec3>,
    threshold: f64,
    iterations: usize,
    seed: u64,
) -> PyResult<(PyRigidTransform, Vec<usize>)> {
    let params = RansacParams {
        iterations,
        threshold,
        seed,
        ..Default::default()
    };
    registration::estimate_rigid_transform_inliers(&pairs(&points_i, &points_j)?, &params)
        .map(|(r, inliers)| (PyRigidTransform(r.transform), inliers))
        .map_err(to_py)
}

fn matches(world: &[Vec3], image: &[(f64, f64)]) -> PyResult<Vec<Match3D2D>> {
    if world.len() != image.len() {
        return Err(PyValueError::new_err(
            "world and image lists differ in length",
        ));
    }
    Ok(world
        .iter()
        .zip(image)
        .map(|(w, i)| Match3D2D {
            world: point(*w),
            image: Pixel::new(i.0, i.1),
        })
        .collect())
}

/// The 2N×12 DLT coefficient matrix, as rows.
#[pyfunction]
fn build_dlt_system(world: Vec<Vec3>, image: Vec<(f64, f64)>) -> PyResult<Vec<Vec<f64>>> {
    let s = localization::build_dlt_system(&matches(&world, &image)?).map_err(to_py)?;
    Ok(s.matrix
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect())
}

/// Conditioned DLT estimate: `(3×4 matrix, residual)`.
#[pyfunction]
fn estimate_projection(world: Vec<Vec3>, image: Vec<(f64, f64)>) -> PyResult<(Rows34, f64)> {
    let s = localization::estimate_projection(&matches(&world, &image)?).map_err(to_py)?;
    Ok((rows34(&s.projection), s.residual))
}

/// World→camera `(R, T)` from a projection and the camera intrinsics.
#[pyfunction]
fn decompose_projection(
    matrix: Rows34,
    intrinsics: (f64, f64, f64, f64),
) -> PyResult<(Rows3, Vec3)> {
    let k = Intrinsics::new(intrinsics.0, intrinsics.1, intrinsics.2, intrinsics.3);
    let (r, t) = localization::decompose_projection(&projection(matrix), &k).map_err(to_py)?;
    Ok((mat3(&r), (t.x, t.y, t.z)))
}

#[pyfunction]
fn camera_center(rotation: Rows3, translation: Vec3) -> Vec3 {
    let t = Vector3::new(translation.0, translation.1, translation.2);
    tuple(&localization::camera_center(&from_rows3(rotation), &t))
}

fn config(json: Option<&str>) -> PyResult<PipelineConfig> {
    match json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(PipelineConfig::default()),
    }
}

/// Renders the dataset described by a JSON pipeline config into `out_dir`;
/// returns the frame count.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None))]
fn simulate(py: Python<'_>, out_dir: PathBuf, config_json: Option<&str>) -> PyResult<usize> {
    let cfg = config(config_json)?;
    py.detach(|| {
        let spec = cfg.simulation()?;
        pipeline::write_dataset(&spec, &out_dir)?;
        Ok(spec.len())
    })
    .map_err(to_py)
}

/// Runs the full pipeline on `dataset_dir`, writes outputs to `out_dir`
/// and returns the report as JSON text.
#[pyfunction]
#[pyo3(signature = (dataset_dir, out_dir, config_json=None))]
fn slam(
    py: Python<'_>,
    dataset_dir: PathBuf,
    out_dir: PathBuf,
    config_json: Option<&str>,
) -> PyResult<String> {
    let cfg = config(config_json)?;
    py.detach(|| {
        let ds = Dataset::open(&dataset_dir)?;
        let out = pipeline::run_slam(&cfg, &ds)?;
        pipeline::write_slam_outputs(&out, &out_dir)?;
        Ok(serde_json::to_string_pretty(&out.report).expect("report serializes"))
    })
    .map_err(to_py)
}

/// Compares two trajectory CSV files; returns the evaluation as JSON text.
#[pyfunction]
fn evaluate(estimated_csv: PathBuf, truth_csv: PathBuf) -> PyResult<String> {
    let est = pipeline::read_trajectory_csv(&estimated_csv).map_err(to_py)?;
    let gt = pipeline::read_trajectory_csv(&truth_csv).map_err(to_py)?;
    let report = pipeline::evaluate(&est, &gt).map_err(to_py)?;
    Ok(serde_json::to_string_pretty(&report).expect("report serializes"))
}

#[pymodule]
fn fringe_slam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRigidTransform>()?;
    m.add_class::<PyCalibration>()?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve_phase, m)?)?;
    m.add_function(wrap_pyfunction!(gray_encode, m)?)?;
    m.add_function(wrap_pyfunction!(gray_decode, m)?)?;
    m.add_function(wrap_pyfunction!(kabsch, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_rigid_transform, m)?)?;
    m.add_function(wrap_pyfunction!(build_dlt_system, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_projection, m)?)?;
    m.add_function(wrap_pyfunction!(decompose_projection, m)?)?;
    m.add_function(wrap_pyfunction!(camera_center, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(slam, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
