//! Iterative closest point refinement over a kd-tree.
//!
//! Two association modes are available: plain nearest target point
//! (updated with the closed-form rigid fit), and the foot point on a local
//! quadric surface fitted to the target neighborhood (updated with a
//! linearized point-to-plane step). The surface mode removes the sampling
//! bias of point-to-point pairs when both clouds sample the same surface at
//! different locations.

use std::num::NonZero;
use std::sync::OnceLock;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Matrix6, SMatrix, SVector, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rigid::{kabsch, Correspondence3D, RegistrationResult};
use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Association {
    #[default]
    PointToPoint,
    PointToSurface,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop once the rms improves by less than this, mm.
    pub tolerance: f64,
    pub min_points: usize,
    /// Initial gate as a multiple of the median target spacing.
    pub gate_initial: f64,
    /// Gate floor as a multiple of the median target spacing.
    pub gate_floor: f64,
    pub association: Association,
    /// Neighbors used for each local surface fit.
    pub surface_neighbors: usize,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-6,
            min_points: 100,
            gate_initial: 10.0,
            gate_floor: 2.0,
            association: Association::PointToPoint,
            surface_neighbors: 20,
        }
    }
}

/// Local cubic height field `h(x, y)` over a tangent frame.
#[derive(Debug, Clone, Copy)]
struct Quadric {
    origin: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    n: Vector3<f64>,
    /// Coefficients of 1, x, y, x^2, xy, y^2, x^3, x^2 y, x y^2, y^3.
    c: [f64; 10],
    fit_rms: f64,
}

impl Quadric {
    fn fit(points: &[Vector3<f64>], origin: Vector3<f64>, interpolate: bool) -> Option<Self> {
        if points.len() < 10 {
            return None;
        }
        let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p) / points.len() as f64;
        let mut cov = Matrix3::zeros();
        for p in points {
            let d = p - mean;
            cov += d * d.transpose();
        }
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let n: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
        let e1: Vector3<f64> = eig.eigenvectors.column(order[2]).into_owned();
        let e2 = n.cross(&e1);
        // Scale local coordinates to unit extent for conditioning.
        let scale = points
            .iter()
            .map(|p| (p - origin).norm())
            .fold(0.0, f64::max)
            .max(1e-12);
        let mut ata = SMatrix::<f64, 10, 10>::zeros();
        let mut atb = SVector::<f64, 10>::zeros();
        let mut rows = Vec::with_capacity(points.len());
        for p in points {
            let d = p - origin;
            let (x, y, z) = (d.dot(&e1) / scale, d.dot(&e2) / scale, d.dot(&n));
            let row = monomials(x, y);
            ata += row * row.transpose();
            atb += row * z;
            rows.push((row, z));
        }
        if interpolate {
            // Pin the constant term to zero so the surface passes through
            // `origin`.
            ata.row_mut(0).fill(0.0);
            ata.column_mut(0).fill(0.0);
            ata[(0, 0)] = 1.0;
            atb[0] = 0.0;
        }
        let sol = ata.cholesky()?.solve(&atb);
        let fit_rms = (rows
            .iter()
            .map(|(r, z)| (r.dot(&sol) - z).powi(2))
            .sum::<f64>()
            / rows.len() as f64)
            .sqrt();
        let mut c = [0.0; 10];
        for (k, v) in c.iter_mut().enumerate() {
            let degree = match k {
                0 => 0,
                1 | 2 => 1,
                3..=5 => 2,
                _ => 3,
            };
            *v = sol[k] / scale.powi(degree);
        }
        Some(Self {
            origin,
            e1,
            e2,
            n,
            c,
            fit_rms,
        })
    }

    fn height(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let c = &self.c;
        let h = monomials(x, y).iter().zip(c).map(|(m, c)| m * c).sum();
        let hx = c[1]
            + 2.0 * c[3] * x
            + c[4] * y
            + 3.0 * c[6] * x * x
            + 2.0 * c[7] * x * y
            + c[8] * y * y;
        let hy = c[2]
            + c[4] * x
            + 2.0 * c[5] * y
            + c[7] * x * x
            + 2.0 * c[8] * x * y
            + 3.0 * c[9] * y * y;
        (h, hx, hy)
    }

    /// Closest surface point to `q` and the unit normal there.
    fn foot(&self, q: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let d = q - self.origin;
        let (qx, qy, qz) = (d.dot(&self.e1), d.dot(&self.e2), d.dot(&self.n));
        let (mut x, mut y) = (qx, qy);
        for _ in 0..8 {
            let (h, hx, hy) = self.height(x, y);
            // Gauss-Newton on |(x - qx, y - qy, h - qz)|^2.
            let r = [x - qx, y - qy, h - qz];
            let jtj = nalgebra::Matrix2::new(1.0 + hx * hx, hx * hy, hx * hy, 1.0 + hy * hy);
            let jtr = nalgebra::Vector2::new(r[0] + hx * r[2], r[1] + hy * r[2]);
            let Some(step) = jtj.try_inverse().map(|m| m * jtr) else {
                break;
            };
            x -= step[0];
            y -= step[1];
            if step.norm() < 1e-14 {
                break;
            }
        }
        let (h, hx, hy) = self.height(x, y);
        let p = self.origin + self.e1 * x + self.e2 * y + self.n * h;
        let normal = (self.n - self.e1 * hx - self.e2 * hy).normalize();
        (p, normal)
    }
}

fn monomials(x: f64, y: f64) -> SVector<f64, 10> {
    SVector::<f64, 10>::from([
        1.0,
        x,
        y,
        x * x,
        x * y,
        y * y,
        x * x * x,
        x * x * y,
        x * y * y,
        y * y * y,
    ])
}

/// Target cloud with its search structure and lazily fitted surfaces.
pub struct IcpTarget<'a> {
    points: &'a [Point3],
    excluded: Option<&'a [bool]>,
    tree: ImmutableKdTree<f64, 3>,
    spacing: f64,
    surfaces: Vec<OnceLock<Option<Quadric>>>,
    surface_neighbors: usize,
    interpolate: bool,
    noise: OnceLock<f64>,
}

impl<'a> IcpTarget<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        Self::with_exclusions(points, None)
    }

    /// `excluded[i]` marks target points (e.g. on cloud boundaries) that
    /// must not be used as partners.
    pub fn with_exclusions(points: &'a [Point3], excluded: Option<&'a [bool]>) -> Self {
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&raw);
        let mut target = Self {
            points,
            excluded,
            tree,
            spacing: 0.0,
            surfaces: (0..points.len()).map(|_| OnceLock::new()).collect(),
            surface_neighbors: 20,
            interpolate: true,
            noise: OnceLock::new(),
        };
        target.spacing = target.median_spacing();
        target
    }

    /// Neighbors per local surface fit; discards surfaces fitted so far.
    pub fn with_surface_neighbors(self, k: usize) -> Self {
        let interpolate = self.interpolate;
        self.with_surface_fit(k, interpolate)
    }

    /// Local surfaces from `k` neighbors. Interpolating surfaces pass
    /// through their center point, which is exact on clean clouds;
    /// approximating ones average noise instead.
    pub fn with_surface_fit(mut self, k: usize, interpolate: bool) -> Self {
        let k = k.max(10);
        if k != self.surface_neighbors || interpolate != self.interpolate {
            self.surface_neighbors = k;
            self.interpolate = interpolate;
            self.surfaces = (0..self.points.len()).map(|_| OnceLock::new()).collect();
            self.noise = OnceLock::new();
        }
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Median nearest-neighbor distance over a deterministic sample.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    fn median_spacing(&self) -> f64 {
        let n = self.points.len();
        if n < 2 {
            return 0.0;
        }
        let stride = (n / 2000).max(1);
        let two = NonZero::new(2).expect("nonzero");
        let mut d: Vec<f64> = (0..n)
            .step_by(stride)
            .filter_map(|i| {
                let p = &self.points[i];
                let nn = self
                    .tree
                    .nearest_n::<SquaredEuclidean>(&[p.x, p.y, p.z], two);
                nn.iter()
                    .find(|m| m.item as usize != i)
                    .map(|m| m.distance.sqrt())
            })
            .collect();
        d.sort_by(f64::total_cmp);
        d.get(d.len() / 2).copied().unwrap_or(0.0)
    }

    pub fn nearest(&self, p: &Point3) -> (usize, f64) {
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]);
        (nn.item as usize, nn.distance.sqrt())
    }

    fn surface(&self, i: usize) -> Option<Quadric> {
        *self.surfaces[i].get_or_init(|| {
            let p = self.points[i];
            let k = NonZero::new(self.surface_neighbors.max(10)).expect("nonzero");
            let nn = self.tree.nearest_n::<SquaredEuclidean>(&[p.x, p.y, p.z], k);
            let pts: Vec<Vector3<f64>> = nn
                .iter()
                .map(|m| self.points[m.item as usize].coords)
                .collect();
            Quadric::fit(&pts, p.coords, self.interpolate)
        })
    }

    /// Median residual of the local surface fits over a deterministic
    /// sample: an estimate of the sensor noise.
    pub fn noise_estimate(&self) -> f64 {
        *self.noise.get_or_init(|| {
            let n = self.points.len();
            let stride = (n / 256).max(1);
            let mut r: Vec<f64> = (0..n)
                .step_by(stride)
                .filter_map(|i| self.surface(i).map(|q| q.fit_rms))
                .collect();
            r.sort_by(f64::total_cmp);
            r.get(r.len() / 2).copied().unwrap_or(0.0)
        })
    }

    /// Largest acceptable surface-fit rms: well above the typical fit
    /// residual (sensor noise), well below the residual across creases.
    fn fit_limit(&self) -> f64 {
        (4.0 * self.noise_estimate()).max(0.01 * self.spacing)
    }

    /// Partner of `q` on the target: the nearest point within `reach`, or
    /// for surface association the foot on that point's fitted surface.
    fn partner(
        &self,
        q: &Point3,
        reach: f64,
        association: Association,
    ) -> Option<(Point3, Vector3<f64>, f64)> {
        let (i, d) = self.nearest(q);
        if d > reach || self.excluded.is_some_and(|e| e[i]) {
            return None;
        }
        match association {
            Association::PointToPoint => Some((self.points[i], Vector3::zeros(), d)),
            Association::PointToSurface => {
                let surf = self.surface(i)?;
                if surf.fit_rms > self.fit_limit() {
                    return None;
                }
                let (foot, normal) = surf.foot(&q.coords);
                let dist = (q.coords - foot).norm();
                // A foot far from the fitted patch is extrapolation.
                if (foot - self.points[i].coords).norm() > reach + d {
                    return None;
                }
                Some((Point3::from(foot), normal, dist))
            }
        }
    }
}

struct Pairs {
    source: Vec<Point3>,
    target: Vec<Point3>,
    normals: Vec<Vector3<f64>>,
    distances: Vec<f64>,
    rms: f64,
}

impl Pairs {
    fn len(&self) -> usize {
        self.source.len()
    }

    /// Robust spread of the residuals: 1.4826 times their median.
    fn robust_sigma(&self) -> f64 {
        let mut d = self.distances.clone();
        if d.is_empty() {
            return 0.0;
        }
        let mid = d.len() / 2;
        let (_, median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
        1.4826 * *median
    }
}

/// Pairs whose residual is within `gate`; partners are searched within
/// `reach` of the moved source point.
fn associate(
    source: &[Point3],
    target: &IcpTarget,
    t: &RigidTransform,
    gate: f64,
    reach: f64,
    association: Association,
) -> Pairs {
    let found: Vec<Option<(Point3, Point3, Vector3<f64>, f64)>> = source
        .par_iter()
        .map(|s| {
            let q = t.apply(s);
            target
                .partner(&q, reach, association)
                .filter(|(_, _, d)| *d <= gate)
                .map(|(p, n, d)| (q, p, n, d))
        })
        .collect();
    let mut pairs = Pairs {
        source: Vec::new(),
        target: Vec::new(),
        normals: Vec::new(),
        distances: Vec::new(),
        rms: 0.0,
    };
    let mut sq = 0.0;
    for (q, p, n, d) in found.into_iter().flatten() {
        pairs.source.push(q);
        pairs.target.push(p);
        pairs.normals.push(n);
        pairs.distances.push(d);
        sq += d * d;
    }
    if !pairs.source.is_empty() {
        pairs.rms = (sq / pairs.source.len() as f64).sqrt();
    }
    pairs
}

/// Incremental transform (applied to already-moved source points).
fn solve_step(pairs: &Pairs, association: Association) -> Result<RigidTransform> {
    match association {
        Association::PointToPoint => {
            let corr: Vec<Correspondence3D> = pairs
                .source
                .iter()
                .zip(&pairs.target)
                .map(|(s, t)| Correspondence3D {
                    point_i: *t,
                    point_j: *s,
                })
                .collect();
            kabsch(&corr)
        }
        Association::PointToSurface => {
            // Linearize about the centroid to keep the system well scaled.
            let c = pairs
                .source
                .iter()
                .fold(Vector3::zeros(), |a, p| a + p.coords)
                / pairs.source.len() as f64;
            let mut ata = Matrix6::zeros();
            let mut atb = Vector6::zeros();
            for ((q, f), n) in pairs.source.iter().zip(&pairs.target).zip(&pairs.normals) {
                let qc = q.coords - c;
                let cr = qc.cross(n);
                let row = Vector6::new(cr.x, cr.y, cr.z, n.x, n.y, n.z);
                let r = (q - f).dot(n);
                ata += row * row.transpose();
                atb -= row * r;
            }
            let svd = ata.svd(true, true);
            let max_sv = svd.singular_values.max();
            let x = svd
                .solve(&atb, max_sv * 1e-12)
                .map_err(|e| Error::DegenerateCorrespondence(e.to_string()))?;
            let omega = Vector3::new(x[0], x[1], x[2]);
            let angle = omega.norm();
            let rot = if angle > 0.0 {
                RigidTransform::from_axis_angle(&omega, angle, Vector3::zeros()).rotation
            } else {
                Matrix3::identity()
            };
            let trans = c + Vector3::new(x[3], x[4], x[5]) - rot * c;
            Ok(RigidTransform::new(rot, trans))
        }
    }
}

/// Truncated mean square: inliers contribute their squared distance, every
/// other source point contributes `gate^2`. Alternating association and
/// refit can only lower it at a fixed gate, and shrinking the gate lowers it
/// further, so the sequence is monotone.
fn objective(pairs: &Pairs, n_source: usize, gate: f64) -> f64 {
    let inl = pairs.source.len() as f64;
    let sq = pairs.rms * pairs.rms * inl + (n_source as f64 - inl) * gate * gate;
    (sq / n_source as f64).sqrt()
}

/// Refines `init` (source → target) by alternating association and rigid
/// updates. Updates that would raise the truncated objective are rejected,
/// so the per-iteration objective never increases.
pub fn icp_refine(
    source: &[Point3],
    target: &[Point3],
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<RegistrationResult> {
    let tgt = IcpTarget::new(target).with_surface_neighbors(params.surface_neighbors);
    icp_refine_with(source, &tgt, init, params).map(|(r, _)| r)
}

/// ICP against a prepared target; also returns the per-iteration truncated
/// rms objective.
pub fn icp_refine_with(
    source: &[Point3],
    target: &IcpTarget,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<(RegistrationResult, Vec<f64>)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InsufficientOverlap {
            found: 0,
            required: params.min_points,
        });
    }
    init.validate()?;
    let n = source.len();
    let spacing = target.spacing().max(1e-9);
    let floor = params.gate_floor * spacing;
    let residual_floor = 1e-3 * spacing;
    let mut gate = (params.gate_initial * spacing).max(floor);
    let reach = |gate: f64| gate.max(floor);
    let mut t = *init;
    let mut pairs = associate(source, target, &t, gate, reach(gate), params.association);
    let enough = |p: &Pairs| p.len() >= params.min_points.max(3);
    if !enough(&pairs) {
        return Err(Error::InsufficientOverlap {
            found: pairs.len(),
            required: params.min_points,
        });
    }
    let mut obj = objective(&pairs, n, gate);
    let mut history = vec![obj];
    let mut iterations = 0;
    while iterations < params.max_iterations {
        iterations += 1;
        let Ok(step) = solve_step(&pairs, params.association) else {
            break;
        };
        let candidate = step.compose(&t);
        let moved = associate(
            source,
            target,
            &candidate,
            gate,
            reach(gate),
            params.association,
        );
        let moved_obj = objective(&moved, n, gate);
        let accepted = enough(&moved) && moved_obj <= obj;
        let improvement = if accepted { obj - moved_obj } else { 0.0 };
        if accepted {
            t = candidate;
            pairs = moved;
            obj = moved_obj;
        }
        // Below the spatial floor, surface residuals keep tightening the
        // gate toward three robust standard deviations.
        let next_gate = if gate > floor {
            (gate * 0.5).max(floor)
        } else if params.association == Association::PointToSurface {
            (gate * 0.5)
                .max(3.0 * pairs.robust_sigma())
                .max(residual_floor)
        } else {
            gate
        };
        let shrunk = (next_gate < 0.9 * gate)
            .then(|| {
                associate(
                    source,
                    target,
                    &t,
                    next_gate,
                    reach(next_gate),
                    params.association,
                )
            })
            .filter(|p| enough(p));
        if let Some(shrunk) = shrunk {
            gate = next_gate;
            pairs = shrunk;
            obj = objective(&pairs, n, gate);
        } else if !accepted || improvement < params.tolerance {
            history.push(obj);
            break;
        }
        history.push(obj);
    }
    Ok((
        RegistrationResult {
            transform: t,
            rms_residual: pairs.rms,
            inlier_count: pairs.source.len(),
            iterations_used: iterations,
        },
        history,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense samples of a bumpy height field.
    fn surface_cloud(step: f64, offset: f64) -> Vec<Point3> {
        let mut pts = Vec::new();
        let n = (120.0 / step) as i32;
        for i in 0..n {
            for j in 0..n {
                let x = -60.0 + i as f64 * step + offset;
                let y = -60.0 + j as f64 * step + offset;
                let z = 500.0 + 15.0 * (x / 25.0).sin() * (y / 30.0).cos() + 0.002 * x * y;
                pts.push(Point3::new(x, y, z));
            }
        }
        pts
    }

    #[test]
    fn self_registration_is_fixed_point() {
        let pts = surface_cloud(1.0, 0.0);
        let r = icp_refine(
            &pts,
            &pts,
            &RigidTransform::identity(),
            &IcpParams::default(),
        )
        .unwrap();
        let (dr, dt) = r.transform.deviation_from_identity();
        assert!(dr < 1e-12 && dt < 1e-9);
        assert!(r.rms_residual < 1e-12);
    }

    fn max_displacement(a: &RigidTransform, b: &RigidTransform, pts: &[Point3]) -> f64 {
        pts.iter()
            .map(|p| (a.apply(p) - b.apply(p)).norm())
            .fold(0.0, f64::max)
    }

    /// Irregular samples of the same height field, centered on the origin.
    fn scattered_cloud(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (x, y): (f64, f64) =
                    (rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0));
                Point3::new(
                    x,
                    y,
                    15.0 * (x / 25.0).sin() * (y / 30.0).cos() + 0.002 * x * y,
                )
            })
            .collect()
    }

    #[test]
    fn converges_to_known_transform() {
        let src = scattered_cloud(15_000, 8);
        let truth = RigidTransform::from_axis_angle(
            &Vector3::new(0.3, 1.0, 0.2),
            0.05,
            Vector3::new(3.0, -2.0, 1.5),
        );
        let tgt: Vec<Point3> = src.iter().map(|p| truth.apply(p)).collect();
        // Within 3 degrees / 3 mm of the truth.
        let init =
            RigidTransform::from_axis_angle(&Vector3::new(-0.5, 1.0, 0.4), 0.05, Vector3::zeros())
                .compose(&truth)
                .compose(&RigidTransform::new(
                    Matrix3::identity(),
                    Vector3::new(1.0, -2.0, 2.0),
                ));
        let params = IcpParams {
            tolerance: 1e-12,
            max_iterations: 200,
            ..Default::default()
        };
        let r = icp_refine(&src, &tgt, &init, &params).unwrap();
        assert!((r.transform.rotation - truth.rotation).norm() < 1e-6);
        assert!((r.transform.translation - truth.translation).norm() < 1e-6);
    }

    #[test]
    fn surface_mode_handles_different_sampling() {
        // An anisotropic paraboloid, close to what the local fit represents.
        let paraboloid = |offset: f64| -> Vec<Point3> {
            surface_cloud(1.0, offset)
                .into_iter()
                .map(|p| {
                    Point3::new(
                        p.x,
                        p.y,
                        0.004 * p.x * p.x + 0.0025 * p.y * p.y + 0.001 * p.x * p.y,
                    )
                })
                .collect()
        };
        let src = paraboloid(0.37);
        let truth = RigidTransform::from_axis_angle(
            &Vector3::new(0.1, 1.0, -0.3),
            0.04,
            Vector3::new(-2.0, 1.0, 2.5),
        );
        let tgt: Vec<Point3> = paraboloid(0.0).iter().map(|p| truth.apply(p)).collect();
        let params = IcpParams {
            association: Association::PointToSurface,
            ..Default::default()
        };
        let tgt_ref = IcpTarget::new(&tgt);
        // Keep away from the target's boundary.
        let inner: Vec<Point3> = src
            .iter()
            .filter(|p| p.x.abs() < 45.0 && p.y.abs() < 45.0)
            .cloned()
            .collect();
        let (r, history) =
            icp_refine_with(&inner, &tgt_ref, &RigidTransform::identity(), &params).unwrap();
        assert!(max_displacement(&r.transform, &truth, &inner) < 1e-5);
        for w in history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn rms_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src: Vec<Point3> = surface_cloud(1.5, 0.0)
            .into_iter()
            .map(|p| {
                p + Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                )
            })
            .collect();
        let tgt = surface_cloud(1.0, 0.2);
        let init =
            RigidTransform::from_axis_angle(&Vector3::z(), 0.05, Vector3::new(2.0, 0.0, 1.0));
        for association in [Association::PointToPoint, Association::PointToSurface] {
            let target = IcpTarget::new(&tgt);
            let params = IcpParams {
                association,
                ..Default::default()
            };
            let (r, history) = icp_refine_with(&src, &target, &init, &params).unwrap();
            for w in history.windows(2) {
                assert!(w[1] <= w[0], "{association:?}: {history:?}");
            }
            assert!(r.rms_residual <= history[0]);
        }
    }

    #[test]
    fn disjoint_clouds_lack_overlap() {
        let a = surface_cloud(1.0, 0.0);
        let b: Vec<Point3> = a
            .iter()
            .map(|p| p + Vector3::new(1000.0, 0.0, 0.0))
            .collect();
        assert!(matches!(
            icp_refine(&a, &b, &RigidTransform::identity(), &IcpParams::default()),
            Err(Error::InsufficientOverlap { .. })
        ));
    }
}
