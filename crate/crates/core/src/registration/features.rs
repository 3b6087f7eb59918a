//! Harris corners with normalized-patch descriptors, and mutual
//! nearest-neighbor matching with a ratio test.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::FramePointCloud;
use crate::geometry::{project, Pixel, Point3};
use crate::raster::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureParams {
    pub max_features: usize,
    /// Side of the square descriptor patch, pixels.
    pub patch_size: usize,
    /// Gaussian window of the structure tensor.
    pub sigma: f64,
    pub harris_k: f64,
    /// Response threshold relative to the strongest response.
    pub relative_threshold: f64,
    /// Half-size of the non-maximum suppression window.
    pub nms_radius: usize,
    /// Sample spacing of surface-resampled descriptors, mm.
    pub surface_step: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            max_features: 1500,
            patch_size: 16,
            sigma: 1.2,
            harris_k: 0.04,
            relative_threshold: 1e-3,
            nms_radius: 3,
            surface_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub pixel: Pixel,
    pub response: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub keypoint: Keypoint,
    /// Zero-mean, unit-norm patch, row-major.
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D {
    pub index_i: usize,
    pub index_j: usize,
    pub pixel_i: Pixel,
    pub pixel_j: Pixel,
    /// Descriptor distance (0 = identical).
    pub score: f64,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution with edge clamping.
fn blur(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                s += kv * data[y * w + xx];
            }
            *out = s;
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                s += kv * tmp[yy * w + x];
            }
            *o = s;
        }
    });
    out
}

/// Harris response `det(M) - k tr(M)^2` of the smoothed structure tensor.
pub fn harris_response(image: &Image, sigma: f64, k: f64) -> Vec<f64> {
    let (w, h) = (image.width, image.height);
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = 0.5 * (image.get(x + 1, y) - image.get(x - 1, y));
            let gy = 0.5 * (image.get(x, y + 1) - image.get(x, y - 1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let kernel = gaussian_kernel(sigma);
    let sxx = blur(&ixx, w, h, &kernel);
    let syy = blur(&iyy, w, h, &kernel);
    let sxy = blur(&ixy, w, h, &kernel);
    (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - k * tr * tr
        })
        .collect()
}

/// Samples a zero-mean unit-norm patch centered at `(u, v)`.
pub fn patch_descriptor(image: &Image, u: f64, v: f64, size: usize) -> Option<Vec<f64>> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut d = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            d.push(image.sample(u - half + c as f64, v - half + r as f64)?);
        }
    }
    normalize_patch(d)
}

/// Offset of the extremum of a 1D parabola through three samples.
fn parabola_peak(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-300 {
        0.0
    } else {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    }
}

/// Corner candidates after non-maximum suppression, strongest first, with
/// subpixel refinement.
pub fn detect_keypoints(image: &Image, params: &FeatureParams) -> Vec<Keypoint> {
    let (w, h) = (image.width, image.height);
    if w < 3 || h < 3 {
        return Vec::new();
    }
    let resp = harris_response(image, params.sigma, params.harris_k);
    let max = resp.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-12 {
        return Vec::new();
    }
    let threshold = max * params.relative_threshold;
    let r = params.nms_radius.max(1);
    let border = params.patch_size / 2 + 2;
    if w <= 2 * border || h <= 2 * border {
        return Vec::new();
    }
    let mut candidates: Vec<(usize, usize, f64)> = (border..h - border)
        .into_par_iter()
        .flat_map_iter(|y| {
            let resp = &resp;
            (border..w - border).filter_map(move |x| {
                let v = resp[y * w + x];
                if v <= threshold {
                    return None;
                }
                for yy in y - r..=y + r {
                    for xx in x - r..=x + r {
                        let o = resp[yy * w + xx];
                        // Ties resolve toward the lower index.
                        if o > v || (o == v && yy * w + xx < y * w + x) {
                            return None;
                        }
                    }
                }
                Some((x, y, v))
            })
        })
        .collect();
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    candidates
        .into_iter()
        .map(|(x, y, v)| {
            let at = |dx: isize, dy: isize| {
                resp[(y as isize + dy) as usize * w + (x as isize + dx) as usize]
            };
            let du = parabola_peak(at(-1, 0), v, at(1, 0));
            let dv = parabola_peak(at(0, -1), v, at(0, 1));
            Keypoint {
                pixel: Pixel::new(x as f64 + du, y as f64 + dv),
                response: v,
            }
        })
        .collect()
}

pub fn detect_features(image: &Image, params: &FeatureParams) -> Vec<Feature> {
    describe(detect_keypoints(image, params), params.max_features, |k| {
        patch_descriptor(image, k.pixel.u, k.pixel.v, params.patch_size)
    })
}

fn describe(
    keypoints: Vec<Keypoint>,
    limit: usize,
    f: impl Fn(&Keypoint) -> Option<Vec<f64>> + Sync,
) -> Vec<Feature> {
    let mut out = Vec::with_capacity(limit.min(keypoints.len()));
    // Describe in parallel blocks, keeping strength order.
    for block in keypoints.chunks(256) {
        let described: Vec<Option<Vec<f64>>> = block.par_iter().map(&f).collect();
        for (keypoint, descriptor) in block.iter().zip(described) {
            if out.len() >= limit {
                return out;
            }
            if let Some(descriptor) = descriptor {
                out.push(Feature {
                    keypoint: *keypoint,
                    descriptor,
                });
            }
        }
    }
    out
}

fn normalize_patch(mut d: Vec<f64>) -> Option<Vec<f64>> {
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|x| *x -= mean);
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    d.iter_mut().for_each(|x| *x /= norm);
    Some(d)
}

/// Local tangent frame `(origin, e1, e2, normal)` of the surface seen at a
/// pixel, with the normal facing the camera.
fn tangent_frame(
    cloud: &FramePointCloud,
    pixel: Pixel,
    radius: f64,
) -> Option<(Point3, Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
    let origin = cloud.lift(pixel)?;
    let eye = cloud.camera.center()?;
    let (cx, cy) = (pixel.u.round() as isize, pixel.v.round() as isize);
    let reach = 4isize;
    let mut pts = Vec::new();
    for y in cy - reach..=cy + reach {
        for x in cx - reach..=cx + reach {
            if x < 0 || y < 0 {
                continue;
            }
            if let Some(p) = cloud.point_at(x as usize, y as usize) {
                if (p - origin).norm() <= radius {
                    pts.push(p.coords);
                }
            }
        }
    }
    if pts.len() < 12 {
        return None;
    }
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let cov = pts.iter().fold(Matrix3::zeros(), |a, p| {
        a + (p - mean) * (p - mean).transpose()
    });
    let eig = cov.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let mut normal = eig.eigenvectors.column(k).into_owned();
    if normal.dot(&(eye - origin)) < 0.0 {
        normal = -normal;
    }
    let seed = if normal.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = (seed - normal * seed.dot(&normal)).normalize();
    let e2 = normal.cross(&e1);
    Some((origin, e1, e2, normal))
}

fn sample_tangent_patch(
    cloud: &FramePointCloud,
    origin: &Point3,
    e1: &Vector3<f64>,
    e2: &Vector3<f64>,
    size: usize,
    step: f64,
) -> Option<Vec<f64>> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut d = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let x = origin + e1 * ((c as f64 - half) * step) + e2 * ((r as f64 - half) * step);
            let px = project(&cloud.camera, &x).ok()?;
            d.push(cloud.texture.sample(px.u, px.v)?);
        }
    }
    Some(d)
}

/// Features whose descriptors are patches resampled on the tangent plane of
/// the reconstructed surface at a fixed metric step, rotated so the patch's
/// intensity centroid lies along the first axis. This keeps descriptors
/// comparable across large viewpoint changes; keypoints without enough
/// surface around them are dropped.
pub fn detect_surface_features(cloud: &FramePointCloud, params: &FeatureParams) -> Vec<Feature> {
    let (size, step) = (params.patch_size, params.surface_step);
    let half = (size as f64 - 1.0) / 2.0;
    describe(
        detect_keypoints(&cloud.texture, params),
        params.max_features,
        |k| {
            let (origin, e1, e2, normal) = tangent_frame(cloud, k.pixel, 2.0 * half * step)?;
            let first =
                normalize_patch(sample_tangent_patch(cloud, &origin, &e1, &e2, size, step)?)?;
            let (mut mx, mut my) = (0.0, 0.0);
            for r in 0..size {
                for c in 0..size {
                    let (x, y) = (c as f64 - half, r as f64 - half);
                    if x * x + y * y <= half * half {
                        mx += x * first[r * size + c];
                        my += y * first[r * size + c];
                    }
                }
            }
            if mx == 0.0 && my == 0.0 {
                return None;
            }
            let theta = my.atan2(mx);
            let a1 = e1 * theta.cos() + e2 * theta.sin();
            let a2 = normal.cross(&a1);
            normalize_patch(sample_tangent_patch(cloud, &origin, &a1, &a2, size, step)?)
        },
    )
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    // Both unit norm: |a - b|^2 = 2 - 2 a.b
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (2.0 - 2.0 * dot).max(0.0).sqrt()
}

/// Best and second-best neighbor of every query: (index, d1, d2).
fn two_nearest(queries: &[Feature], pool: &[Feature]) -> Vec<Option<(usize, f64, f64)>> {
    queries
        .par_iter()
        .map(|q| {
            let mut best = (usize::MAX, f64::INFINITY);
            let mut second = f64::INFINITY;
            for (j, p) in pool.iter().enumerate() {
                let d = distance(&q.descriptor, &p.descriptor);
                if d < best.1 {
                    second = best.1;
                    best = (j, d);
                } else if d < second {
                    second = d;
                }
            }
            (best.0 != usize::MAX).then_some((best.0, best.1, second))
        })
        .collect()
}

/// Mutual nearest neighbors that pass the ratio test in both directions.
pub fn match_features(
    features_i: &[Feature],
    features_j: &[Feature],
    ratio: f64,
) -> Vec<Correspondence2D> {
    let fwd = two_nearest(features_i, features_j);
    let bwd = two_nearest(features_j, features_i);
    let passes = |d1: f64, d2: f64| d1 == 0.0 || d1 < ratio * d2;
    let mut out = Vec::new();
    for (i, f) in fwd.iter().enumerate() {
        let Some((j, d1, d2)) = *f else { continue };
        let Some((back, e1, e2)) = bwd[j] else {
            continue;
        };
        if back == i && passes(d1, d2) && passes(e1, e2) {
            out.push(Correspondence2D {
                index_i: i,
                index_j: j,
                pixel_i: features_i[i].keypoint.pixel,
                pixel_j: features_j[j].keypoint.pixel,
                score: d1,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Calibration, RigidTransform};
    use crate::simulator::{posed_device, raycast_depth, Scene, Shape, Texture};
    use nalgebra::Vector3;

    #[test]
    fn constant_image_has_no_features() {
        let img = Image::filled(64, 48, 0.4);
        assert!(detect_features(&img, &FeatureParams::default()).is_empty());
    }

    #[test]
    fn detection_is_deterministic() {
        let img = Image::from_fn(96, 80, |x, y| {
            ((x as f64 * 0.37).sin() * (y as f64 * 0.23).cos() + 1.0) / 2.0
        });
        let a = detect_features(&img, &FeatureParams::default());
        let b = detect_features(&img, &FeatureParams::default());
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn checkerboard_corners_near_projected_corners() {
        let calib = Calibration::desk_scale(500.0);
        let size = 30.0;
        let scene = Scene::new().with(
            Shape::Plane {
                point: Point3::new(0.0, 0.0, 495.0),
                normal: Vector3::new(0.03, 0.02, -1.0).normalize(),
            },
            Texture::Checker {
                size,
                low: 0.2,
                high: 0.8,
            },
        );
        // Render at 4x and box-filter down so edges are anti-aliased; with
        // pixel centers on integers, fine pixel X covers coarse u = (X - 1.5) / 4.
        let mut fine = posed_device(&calib.camera, &RigidTransform::identity());
        fine.width *= 4;
        fine.height *= 4;
        fine.intrinsics.fx *= 4.0;
        fine.intrinsics.fy *= 4.0;
        fine.intrinsics.u0 = 4.0 * fine.intrinsics.u0 + 1.5;
        fine.intrinsics.v0 = 4.0 * fine.intrinsics.v0 + 1.5;
        let render = raycast_depth(&scene, &fine);
        let img = Image::from_fn(calib.camera.width, calib.camera.height, |x, y| {
            let mut s = 0.0;
            for dy in 0..4 {
                for dx in 0..4 {
                    s += render.albedo[(4 * y + dy) * fine.width + 4 * x + dx];
                }
            }
            s / 16.0
        });
        let feats = detect_features(&img, &FeatureParams::default());
        assert!(feats.len() > 20);
        // True corners: where the plane crosses lines x = i size, y = j size.
        let a = calib.camera_matrix().unwrap();
        let (n, p0) = (
            Vector3::new(0.03, 0.02, -1.0).normalize(),
            Point3::new(0.0, 0.0, 495.0),
        );
        let mut corners = Vec::new();
        for i in -10..=10 {
            for j in -10..=10 {
                let (x, y) = (i as f64 * size, j as f64 * size);
                // Solve n . ((x, y, z) - p0) = 0 for z.
                let z = p0.z - (n.x * (x - p0.x) + n.y * (y - p0.y)) / n.z;
                if let Ok(px) = project(&a, &Point3::new(x, y, z)) {
                    corners.push(px);
                }
            }
        }
        let mut near = 0;
        for f in &feats {
            let d = corners
                .iter()
                .map(|c| c.distance(&f.keypoint.pixel))
                .fold(f64::INFINITY, f64::min);
            if d < 1.0 {
                near += 1;
            }
        }
        // Every response on a clean, anti-aliased checker is a corner.
        assert!(
            near as f64 >= 0.95 * feats.len() as f64,
            "{near}/{}",
            feats.len()
        );
    }

    #[test]
    fn self_match_is_identity() {
        let img = Image::from_fn(120, 100, |x, y| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.2
                * (x * 0.31 + 1.3 * (y * 0.07).sin()).sin()
                * (y * 0.27 + (x * 0.05).cos()).cos()
        });
        let f = detect_features(&img, &FeatureParams::default());
        let m = match_features(&f, &f, 0.8);
        assert!(!m.is_empty());
        for c in &m {
            assert_eq!(c.index_i, c.index_j);
        }
    }

    #[test]
    fn matching_is_symmetric() {
        let a = Image::from_fn(120, 100, |x, y| {
            0.5 + 0.3 * ((x as f64 * 0.3).sin() * (y as f64 * 0.21 + 0.4).sin())
        });
        let b = Image::from_fn(120, 100, |x, y| a.get((x + 3).min(119), (y + 2).min(99)));
        let fa = detect_features(&a, &FeatureParams::default());
        let fb = detect_features(&b, &FeatureParams::default());
        let ab = match_features(&fa, &fb, 0.8);
        let ba = match_features(&fb, &fa, 0.8);
        let mut x: Vec<(usize, usize)> = ab.iter().map(|c| (c.index_i, c.index_j)).collect();
        let mut y: Vec<(usize, usize)> = ba.iter().map(|c| (c.index_j, c.index_i)).collect();
        x.sort();
        y.sort();
        assert_eq!(x, y);
    }
}
