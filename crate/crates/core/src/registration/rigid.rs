//! Closed-form least-squares rigid alignment and its RANSAC wrapper.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence3D {
    /// Point in the reference frame i.
    pub point_i: Point3,
    /// Point in the moving frame j.
    pub point_j: Point3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Maps frame-j coordinates into frame i.
    pub transform: RigidTransform,
    pub rms_residual: f64,
    pub inlier_count: usize,
    pub iterations_used: usize,
}

/// Minimizes `sum |p_i - (R p_j + T)|^2` by centroid subtraction and SVD of
/// the cross-covariance, with the reflection case corrected.
pub fn kabsch(pairs: &[Correspondence3D]) -> Result<RigidTransform> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::DegenerateCorrespondence(format!(
            "need at least 3 pairs, got {n}"
        )));
    }
    let inv = 1.0 / n as f64;
    let ci = pairs
        .iter()
        .fold(Vector3::zeros(), |a, c| a + c.point_i.coords)
        * inv;
    let cj = pairs
        .iter()
        .fold(Vector3::zeros(), |a, c| a + c.point_j.coords)
        * inv;
    let mut h = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for c in pairs {
        let a = c.point_j.coords - cj;
        let b = c.point_i.coords - ci;
        h += a * b.transpose();
        scatter += a * a.transpose();
    }
    let s = scatter.symmetric_eigenvalues();
    let mut ev = [s[0], s[1], s[2]];
    ev.sort_by(f64::total_cmp);
    if !(ev[1] > 1e-10 * ev[2].max(f64::MIN_POSITIVE)) || ev[2] <= 0.0 {
        return Err(Error::DegenerateCorrespondence(
            "points are collinear or coincident".into(),
        ));
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = polish_rotation(v_t.transpose() * d * u.transpose(), &h);
    let t = ci - r * cj;
    Ok(RigidTransform::new(r, t))
}

/// Newton steps on `max tr(R H)`. The SVD loses digits when the point set
/// is nearly collinear; at the optimum `R H` is symmetric, and its skew part
/// gives the correction.
fn polish_rotation(mut r: Matrix3<f64>, h: &Matrix3<f64>) -> Matrix3<f64> {
    for _ in 0..3 {
        let m = r * h;
        let g = Vector3::new(
            m[(1, 2)] - m[(2, 1)],
            m[(2, 0)] - m[(0, 2)],
            m[(0, 1)] - m[(1, 0)],
        );
        let sym = (m + m.transpose()) * 0.5;
        let hess = Matrix3::identity() * m.trace() - sym;
        let Some(omega) = hess.cholesky().map(|c| c.solve(&g)) else {
            break;
        };
        if !omega.iter().all(|x| x.is_finite()) {
            break;
        }
        r = Rotation3::new(omega).into_inner() * r;
        if omega.norm() < 1e-15 {
            break;
        }
    }
    r
}

pub fn residuals(t: &RigidTransform, pairs: &[Correspondence3D]) -> Vec<f64> {
    pairs
        .iter()
        .map(|c| (c.point_i - t.apply(&c.point_j)).norm())
        .collect()
}

pub fn rms(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    /// Inlier distance, mm.
    pub threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 1000,
            threshold: 3.0,
            min_inliers: 3,
            seed: 0,
        }
    }
}

/// Robust rigid fit; the returned transform is refit on the final inliers.
pub fn estimate_rigid_transform(
    pairs: &[Correspondence3D],
    params: &RansacParams,
) -> Result<RegistrationResult> {
    let (result, _) = estimate_rigid_transform_inliers(pairs, params)?;
    Ok(result)
}

/// As [`estimate_rigid_transform`], also returning the inlier indices.
pub fn estimate_rigid_transform_inliers(
    pairs: &[Correspondence3D],
    params: &RansacParams,
) -> Result<(RegistrationResult, Vec<usize>)> {
    let n = pairs.len();
    let required = params.min_inliers.max(3);
    if n < 3 {
        return Err(Error::DegenerateCorrespondence(format!(
            "need at least 3 pairs, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let thr = params.threshold;
    let mut best: Option<(usize, f64, RigidTransform)> = None;
    let mut iterations = 0;
    for _ in 0..params.iterations.max(1) {
        iterations += 1;
        let idx = sample(&mut rng, n, 3);
        let subset: Vec<Correspondence3D> = idx.iter().map(|i| pairs[i]).collect();
        let Ok(t) = kabsch(&subset) else { continue };
        let (mut count, mut sq) = (0, 0.0);
        for c in pairs {
            let r = (c.point_i - t.apply(&c.point_j)).norm();
            if r < thr {
                count += 1;
                sq += r * r;
            }
        }
        let score = if count > 0 {
            sq / count as f64
        } else {
            f64::INFINITY
        };
        if best
            .as_ref()
            .is_none_or(|b| count > b.0 || (count == b.0 && score < b.1))
        {
            best = Some((count, score, t));
        }
        if count == n {
            break;
        }
    }
    let (_, _, mut t) =
        best.ok_or_else(|| Error::DegenerateCorrespondence("every sample was degenerate".into()))?;
    let mut inliers: Vec<usize> = Vec::new();
    for _ in 0..10 {
        let next: Vec<usize> = (0..n)
            .filter(|&i| (pairs[i].point_i - t.apply(&pairs[i].point_j)).norm() < thr)
            .collect();
        if next.len() < required {
            return Err(Error::DegenerateCorrespondence(format!(
                "{} inliers, need at least {required}",
                next.len()
            )));
        }
        let subset: Vec<Correspondence3D> = next.iter().map(|&i| pairs[i]).collect();
        t = kabsch(&subset)?;
        let stable = next == inliers;
        inliers = next;
        if stable {
            break;
        }
    }
    let rms_residual = rms(inliers
        .iter()
        .map(|&i| (pairs[i].point_i - t.apply(&pairs[i].point_j)).norm()));
    Ok((
        RegistrationResult {
            transform: t,
            rms_residual,
            inlier_count: inliers.len(),
            iterations_used: iterations,
        },
        inliers,
    ))
}
