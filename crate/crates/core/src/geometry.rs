//! Pinhole camera and projector models, projection matrices, rigid transforms
//! and camera/projector triangulation.
//!
//! All lengths are millimeters; pixel coordinates place pixel centers at
//! integer positions.

use nalgebra::{Matrix3, Matrix3x4, Rotation3, Unit, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;

/// Tolerance used when checking rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Default condition-number bound for triangulation.
pub const DEFAULT_CONDITION_BOUND: f64 = 1e12;

/// Sub-pixel image coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub u0: f64,
    pub v0: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, u0: f64, v0: f64) -> Self {
        Self { fx, fy, u0, v0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Calibration(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !self.u0.is_finite() || !self.v0.is_finite() {
            return Err(Error::Calibration("principal point must be finite".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.u0, 0.0, self.fy, self.v0, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.u0 / self.fx,
            0.0,
            1.0 / self.fy,
            -self.v0 / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// World-to-device transform `x_dev = R x_world + T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    #[serde(with = "serde_matrix3")]
    pub rotation: Matrix3<f64>,
    #[serde(with = "serde_vector3")]
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    /// Extrinsics of a device centered at `center` whose rotation maps world
    /// directions into device directions.
    pub fn from_center(rotation: Matrix3<f64>, center: Point3) -> Self {
        Self::new(rotation, -(rotation * center.coords))
    }

    pub fn validate(&self) -> Result<()> {
        let err = orthonormality_error(&self.rotation);
        if err > ROTATION_TOLERANCE || !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::Calibration(format!(
                "rotation is not orthonormal with det +1 (error {err:e})"
            )));
        }
        Ok(())
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Point3 {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn as_transform(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.translation)
    }
}

/// 3x4 homogeneous projection `s [u v 1]^T = A [x y z 1]^T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMatrix(#[serde(with = "serde_matrix3x4")] pub Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ProjectionMatrix(self.0 * factor)
    }

    /// Row-major 12-vector (a11 .. a34).
    pub fn to_vector(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[4 * r + c] = self.0[(r, c)];
            }
        }
        out
    }

    pub fn from_vector(v: &[f64]) -> Self {
        ProjectionMatrix(Matrix3x4::from_row_slice(v))
    }

    /// Homogeneous depth `A_3 . (X, 1)`.
    pub fn homogeneous_depth(&self, x: &Point3) -> f64 {
        self.0
            .row(2)
            .dot(&Vector4::new(x.x, x.y, x.z, 1.0).transpose())
    }

    /// Right null vector of `A` (the optical center), dehomogenized.
    pub fn center(&self) -> Option<Point3> {
        let left = self.0.fixed_view::<3, 3>(0, 0).into_owned();
        let inv = left.try_inverse()?;
        Some(Point3::from(-(inv * self.0.column(3))))
    }
}

pub fn build_projection_matrix(
    intrinsics: &Intrinsics,
    extrinsics: &Extrinsics,
) -> Result<ProjectionMatrix> {
    intrinsics.validate()?;
    extrinsics.validate()?;
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&extrinsics.rotation);
    rt.set_column(3, &extrinsics.translation);
    Ok(ProjectionMatrix(intrinsics.matrix() * rt))
}

/// Projects a world point. Fails when the homogeneous depth vanishes.
pub fn project(a: &ProjectionMatrix, x: &Point3) -> Result<Pixel> {
    let h = a.0 * Vector4::new(x.x, x.y, x.z, 1.0);
    let scale = a.0.row(2).norm().max(f64::MIN_POSITIVE);
    if (h.z / scale).abs() < 1e-12 {
        return Err(Error::PointAtInfinity(h.z));
    }
    Ok(Pixel::new(h.x / h.z, h.y / h.z))
}

/// Intersects the camera ray through `pixel_c` with the projector plane of
/// column `u_p`.
///
/// The 3x3 system stacks the two camera rows of `s [u v 1] = Ac X` and the
/// projector u-row of `s [u_p . 1] = Ap X`. Rows are equilibrated before the
/// 1-norm condition number is compared against `condition_bound`.
pub fn triangulate(
    pixel_c: Pixel,
    u_p: f64,
    camera: &ProjectionMatrix,
    projector: &ProjectionMatrix,
    condition_bound: f64,
) -> Result<Point3> {
    let ac = &camera.0;
    let ap = &projector.0;
    let mut m = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for c in 0..3 {
        m[(0, c)] = ac[(0, c)] - pixel_c.u * ac[(2, c)];
        m[(1, c)] = ac[(1, c)] - pixel_c.v * ac[(2, c)];
        m[(2, c)] = ap[(0, c)] - u_p * ap[(2, c)];
    }
    b[0] = pixel_c.u * ac[(2, 3)] - ac[(0, 3)];
    b[1] = pixel_c.v * ac[(2, 3)] - ac[(1, 3)];
    b[2] = u_p * ap[(2, 3)] - ap[(0, 3)];

    for r in 0..3 {
        let n = m.row(r).norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateRay {
                condition: f64::INFINITY,
                bound: condition_bound,
            });
        }
        for c in 0..3 {
            m[(r, c)] /= n;
        }
        b[r] /= n;
    }

    let lu = m.lu();
    let inv = lu.try_inverse().ok_or(Error::DegenerateRay {
        condition: f64::INFINITY,
        bound: condition_bound,
    })?;
    let condition = norm_1(&m) * norm_1(&inv);
    if !condition.is_finite() || condition > condition_bound {
        return Err(Error::DegenerateRay {
            condition,
            bound: condition_bound,
        });
    }
    let x = inv * b;
    Ok(Point3::from(x))
}

fn norm_1(m: &Matrix3<f64>) -> f64 {
    (0..3)
        .map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Frobenius distance of `R^T R` from identity, plus `|det R - 1|`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let e = (r.transpose() * r - Matrix3::identity()).norm();
    e.max((r.determinant() - 1.0).abs())
}

/// Nearest rotation matrix (in Frobenius norm) with det +1.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Rotation angle of a rotation matrix, radians in [0, pi].
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near identity; use the skew part there.
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let s = skew.norm() / 2.0;
    s.atan2(c)
}

/// Rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    #[serde(with = "serde_matrix3")]
    pub rotation: Matrix3<f64>,
    #[serde(with = "serde_vector3")]
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = if axis.norm() == 0.0 || angle == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix()
        };
        Self::new(rot, translation)
    }

    /// Rotation vector (axis * angle) of the rotation part.
    pub fn rotation_vector(&self) -> Vector3<f64> {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        rot.scaled_axis()
    }

    pub fn validate(&self) -> Result<()> {
        let err = orthonormality_error(&self.rotation);
        if err > ROTATION_TOLERANCE {
            return Err(Error::Input(format!(
                "rotation not orthonormal (error {err:e})"
            )));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(Error::Input("translation not finite".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first. Rotations drifting beyond
    /// [`ROTATION_TOLERANCE`] are re-orthonormalized.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = self.rotation * other.rotation;
        if orthonormality_error(&rotation) > ROTATION_TOLERANCE {
            rotation = nearest_rotation(&rotation);
        }
        RigidTransform::new(
            rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Rotation angle and translation norm of `self` relative to identity.
    pub fn deviation_from_identity(&self) -> (f64, f64) {
        (self.rotation_angle(), self.translation.norm())
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[4 * r + c] = self.rotation[(r, c)];
            }
            out[4 * r + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(v: &[f64; 12]) -> Self {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::new(rotation, Vector3::new(v[3], v[7], v[11]))
    }

    /// Fractional power along the rotation vector and translation, used to
    /// spread a correction over a sequence.
    pub fn fraction(&self, alpha: f64) -> RigidTransform {
        let rv = self.rotation_vector();
        let angle = rv.norm();
        let rot = if angle == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(rv), angle * alpha).matrix()
        };
        RigidTransform::new(rot, self.translation * alpha)
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// One device (camera or projector) of a calibrated pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceCalibration {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl DeviceCalibration {
    pub fn projection(&self) -> Result<ProjectionMatrix> {
        build_projection_matrix(&self.intrinsics, &self.extrinsics)
    }

    pub fn center(&self) -> Point3 {
        self.extrinsics.center()
    }

    /// Unit direction, in world coordinates, of the ray through `pixel`.
    pub fn ray_direction(&self, pixel: Pixel) -> Vector3<f64> {
        let d_dev = self.intrinsics.inverse_matrix() * Vector3::new(pixel.u, pixel.v, 1.0);
        (self.extrinsics.rotation.transpose() * d_dev).normalize()
    }

    /// Depth of a world point along the device's optical axis.
    pub fn depth(&self, x: &Point3) -> f64 {
        (self.extrinsics.rotation * x.coords + self.extrinsics.translation).z
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Calibration(format!(
                "{name} image size must be nonzero"
            )));
        }
        self.intrinsics.validate()?;
        self.extrinsics
            .validate()
            .map_err(|e| Error::Calibration(format!("{name}: {e}")))
    }
}

/// Calibrated camera/projector pair. The sensor frame is the frame in which
/// both extrinsics are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub camera: DeviceCalibration,
    pub projector: DeviceCalibration,
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate("camera")?;
        self.projector.validate("projector")?;
        Ok(())
    }

    pub fn baseline(&self) -> f64 {
        (self.camera.center() - self.projector.center()).norm()
    }

    pub fn camera_matrix(&self) -> Result<ProjectionMatrix> {
        self.camera.projection()
    }

    pub fn projector_matrix(&self) -> Result<ProjectionMatrix> {
        self.projector.projection()
    }

    /// Desk-scale pair: 480x300 camera, 456x570 projector, 150 mm baseline,
    /// axes converging at `working_distance`.
    pub fn desk_scale(working_distance: f64) -> Self {
        let camera = DeviceCalibration {
            width: 480,
            height: 300,
            intrinsics: Intrinsics::new(520.0, 520.0, 239.5, 149.5),
            extrinsics: Extrinsics::identity(),
        };
        let baseline = 150.0;
        let yaw = (baseline / working_distance).atan();
        // Projector sits to the camera's right and turns back toward its axis.
        // World-to-device rotation whose optical axis is (-sin yaw, 0, cos yaw).
        let rotation = *Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).matrix();
        let projector = DeviceCalibration {
            width: 456,
            height: 570,
            intrinsics: Intrinsics::new(480.0, 480.0, 227.5, 284.5),
            extrinsics: Extrinsics::from_center(rotation, Point3::new(baseline, 0.0, 0.0)),
        };
        Calibration { camera, projector }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let calib: Calibration = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        calib.validate()?;
        Ok(calib)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("calibration serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

mod serde_matrix3 {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

mod serde_matrix3x4 {
    use nalgebra::Matrix3x4;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3x4<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 4]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3x4<f64>, D::Error> {
        let rows = <[[f64; 4]; 3]>::deserialize(d)?;
        Ok(Matrix3x4::from_fn(|r, c| rows[r][c]))
    }
}

mod serde_vector3 {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(a[0], a[1], a[2]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(-3.0..3.0);
        RigidTransform::from_axis_angle(&axis, angle, Vector3::zeros()).rotation
    }

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        RigidTransform::new(
            random_rotation(rng),
            Vector3::new(
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
            ),
        )
    }

    // Element-wise product, independent of nalgebra's multiply.
    fn naive_product(k: &Matrix3<f64>, e: &Extrinsics) -> [[f64; 4]; 3] {
        let mut rt = [[0.0; 4]; 3];
        for r in 0..3 {
            for c in 0..3 {
                rt[r][c] = e.rotation[(r, c)];
            }
            rt[r][3] = e.translation[r];
        }
        let mut out = [[0.0; 4]; 3];
        for r in 0..3 {
            for c in 0..4 {
                let mut s = 0.0;
                for k_ in 0..3 {
                    s += k[(r, k_)] * rt[k_][c];
                }
                out[r][c] = s;
            }
        }
        out
    }

    #[test]
    fn identity_projection_matrix() {
        let a = build_projection_matrix(
            &Intrinsics::new(1.0, 1.0, 0.0, 0.0),
            &Extrinsics::identity(),
        )
        .unwrap();
        let mut expected = Matrix3x4::zeros();
        expected
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&Matrix3::identity());
        assert_eq!(a.0, expected);
    }

    #[test]
    fn projection_matrix_first_row() {
        let a = build_projection_matrix(
            &Intrinsics::new(1000.0, 1000.0, 960.0, 600.0),
            &Extrinsics::identity(),
        )
        .unwrap();
        assert_eq!(
            a.0.row(0).iter().copied().collect::<Vec<_>>(),
            vec![1000.0, 0.0, 960.0, 0.0]
        );
    }

    #[test]
    fn projection_matrix_matches_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let k = Intrinsics::new(
                rng.random_range(100.0..2000.0),
                rng.random_range(100.0..2000.0),
                rng.random_range(0.0..1000.0),
                rng.random_range(0.0..1000.0),
            );
            let t = random_transform(&mut rng);
            let e = Extrinsics::new(t.rotation, t.translation);
            let a = build_projection_matrix(&k, &e).unwrap();
            let naive = naive_product(&k.matrix(), &e);
            for r in 0..3 {
                for c in 0..4 {
                    assert_abs_diff_eq!(
                        a.0[(r, c)],
                        naive[r][c],
                        epsilon = 1e-9 * naive[r][c].abs().max(1.0)
                    );
                }
            }
        }
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let e = Extrinsics::new(Matrix3::identity() * 1.01, Vector3::zeros());
        let err = build_projection_matrix(&Intrinsics::new(1.0, 1.0, 0.0, 0.0), &e).unwrap_err();
        assert!(matches!(err, Error::Calibration(_)));
    }

    #[test]
    fn project_simple_cases() {
        let a = build_projection_matrix(
            &Intrinsics::new(1.0, 1.0, 0.0, 0.0),
            &Extrinsics::identity(),
        )
        .unwrap();
        assert_eq!(
            project(&a, &Point3::new(0.0, 0.0, 1.0)).unwrap(),
            Pixel::new(0.0, 0.0)
        );
        assert_eq!(
            project(&a, &Point3::new(2.0, 3.0, 2.0)).unwrap(),
            Pixel::new(1.0, 1.5)
        );
        assert!(matches!(
            project(&a, &Point3::new(1.0, 1.0, 0.0)),
            Err(Error::PointAtInfinity(_))
        ));
    }

    #[test]
    fn project_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let mut m = Matrix3x4::zeros();
            for v in m.iter_mut() {
                *v = rng.random_range(-10.0..10.0);
            }
            let a = ProjectionMatrix(m);
            let x = Point3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let mut h = [0.0; 3];
            for r in 0..3 {
                h[r] = m[(r, 0)] * x.x + m[(r, 1)] * x.y + m[(r, 2)] * x.z + m[(r, 3)];
            }
            if h[2].abs() < 1e-3 {
                continue;
            }
            let p = project(&a, &x).unwrap();
            assert_abs_diff_eq!(
                p.u,
                h[0] / h[2],
                epsilon = 1e-9 * (h[0] / h[2]).abs().max(1.0)
            );
            assert_abs_diff_eq!(
                p.v,
                h[1] / h[2],
                epsilon = 1e-9 * (h[1] / h[2]).abs().max(1.0)
            );
        }
    }

    #[test]
    fn triangulate_round_trip_desk_scale() {
        let calib = Calibration::desk_scale(470.0);
        let ac = calib.camera_matrix().unwrap();
        let ap = calib.projector_matrix().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = Point3::new(
                rng.random_range(-150.0..150.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(350.0..650.0),
            );
            let pc = project(&ac, &x).unwrap();
            let up = project(&ap, &x).unwrap().u;
            let y = triangulate(pc, up, &ac, &ap, DEFAULT_CONDITION_BOUND).unwrap();
            assert!((y - x).norm() <= 1e-9 * x.coords.norm(), "{x} vs {y}");
            let back = project(&ac, &y).unwrap();
            assert!(back.distance(&pc) < 1e-6);
        }
    }

    #[test]
    fn triangulate_on_optical_axis() {
        let calib = Calibration::desk_scale(470.0);
        let cam = DeviceCalibration {
            intrinsics: Intrinsics::new(1.0, 1.0, 0.0, 0.0),
            ..calib.camera
        };
        let ac = cam.projection().unwrap();
        let ap = calib.projector_matrix().unwrap();
        let x = Point3::new(0.0, 0.0, 500.0);
        let up = project(&ap, &x).unwrap().u;
        let y = triangulate(Pixel::new(0.0, 0.0), up, &ac, &ap, DEFAULT_CONDITION_BOUND).unwrap();
        assert_eq!(y.x, 0.0);
        assert_eq!(y.y, 0.0);
        assert_abs_diff_eq!(y.z, 500.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let calib = Calibration::desk_scale(470.0);
        let ac = calib.camera_matrix().unwrap();
        let mut proj = calib.projector;
        proj.extrinsics = Extrinsics::from_center(proj.extrinsics.rotation, Point3::origin());
        let ap = proj.projection().unwrap();
        let x = Point3::new(10.0, -20.0, 480.0);
        let pc = project(&ac, &x).unwrap();
        let up = project(&ap, &x).unwrap().u;
        let err = triangulate(pc, up, &ac, &ap, DEFAULT_CONDITION_BOUND).unwrap_err();
        assert!(matches!(err, Error::DegenerateRay { .. }), "{err}");
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_transform(&mut rng);
        assert_eq!(t.compose(&RigidTransform::identity()), t);
        let id = t.compose(&t.inverse());
        assert!((id.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!(id.translation.norm() < 1e-9);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let t1 = random_transform(&mut rng);
            let t2 = random_transform(&mut rng);
            let p = Point3::new(
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
                rng.random_range(-100.0..100.0),
            );
            let seq = t1.apply(&t2.apply(&p));
            let comp = t1.compose(&t2).apply(&p);
            assert!((seq - comp).norm() < 1e-9);
        }
    }

    #[test]
    fn long_composition_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut acc = RigidTransform::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&random_transform(&mut rng));
            // keep translation bounded; only rotation drift matters here
            acc.translation /= acc.translation.norm().max(1.0);
        }
        assert!(orthonormality_error(&acc.rotation) < 1e-6);
    }

    #[test]
    fn fraction_endpoints() {
        let t = RigidTransform::from_axis_angle(
            &Vector3::new(0.3, 1.0, -0.2),
            0.4,
            Vector3::new(1.0, 2.0, 3.0),
        );
        let full = t.fraction(1.0);
        assert!((full.rotation - t.rotation).norm() < 1e-12);
        assert!((full.translation - t.translation).norm() < 1e-12);
        let none = t.fraction(0.0);
        assert!((none.rotation - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn rotation_angle_small_and_large() {
        for &angle in &[1e-9, 1e-4, 0.5, 3.0] {
            let t = RigidTransform::from_axis_angle(
                &Vector3::new(1.0, 2.0, 3.0),
                angle,
                Vector3::zeros(),
            );
            assert_abs_diff_eq!(t.rotation_angle(), angle, epsilon = 1e-12);
        }
    }

    #[test]
    fn calibration_json_round_trip() {
        let calib = Calibration::desk_scale(470.0);
        let text = serde_json::to_string(&calib).unwrap();
        let back: Calibration = serde_json::from_str(&text).unwrap();
        assert_eq!(calib, back);
        assert!((calib.baseline() - 150.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn projection_scale_invariance(
            scale in prop_oneof![-1e3..-1e-3f64, 1e-3..1e3f64],
            x in -200.0..200.0f64, y in -200.0..200.0f64, z in 300.0..800.0f64,
        ) {
            let calib = Calibration::desk_scale(470.0);
            let a = calib.camera_matrix().unwrap();
            let p = Point3::new(x, y, z);
            let p1 = project(&a, &p).unwrap();
            let p2 = project(&a.scaled(scale), &p).unwrap();
            prop_assert!((p1.u - p2.u).abs() <= 1e-12 * p1.u.abs().max(1.0));
            prop_assert!((p1.v - p2.v).abs() <= 1e-12 * p1.v.abs().max(1.0));
        }
    }
}
