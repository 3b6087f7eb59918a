//! Per-frame point clouds with the camera-pixel bridge, and the front-end
//! that produces them from a capture stack.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::{
    triangulate, Calibration, Pixel, Point3, ProjectionMatrix, DEFAULT_CONDITION_BOUND,
};
use crate::phase::{CaptureStack, PhaseParams};
use crate::raster::Image;

/// Reconstructed cloud of one view, in that view's sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePointCloud {
    pub frame_id: usize,
    pub width: usize,
    pub height: usize,
    pub points: Vec<Point3>,
    pub colors: Vec<[u8; 3]>,
    /// Source pixel (row-major index) of every point.
    pub pixels: Vec<u32>,
    /// Point index per camera pixel.
    pub pixel_index: Vec<Option<u32>>,
    /// Camera projection in the sensor frame.
    pub camera: ProjectionMatrix,
    pub texture: Image,
}

impl FramePointCloud {
    pub fn from_pixel_points(
        frame_id: usize,
        per_pixel: &[Option<Point3>],
        texture: Image,
        camera: ProjectionMatrix,
    ) -> Self {
        let (width, height) = (texture.width, texture.height);
        let mut points = Vec::new();
        let mut colors = Vec::new();
        let mut pixels = Vec::new();
        let mut pixel_index = vec![None; per_pixel.len()];
        for (i, p) in per_pixel.iter().enumerate() {
            if let Some(p) = p {
                pixel_index[i] = Some(points.len() as u32);
                points.push(*p);
                let g = (texture.data[i].clamp(0.0, 1.0) * 255.0).round() as u8;
                colors.push([g, g, g]);
                pixels.push(i as u32);
            }
        }
        Self {
            frame_id,
            width,
            height,
            points,
            colors,
            pixels,
            pixel_index,
            camera,
            texture,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point at integer pixel `(x, y)`, if valid.
    pub fn point_at(&self, x: usize, y: usize) -> Option<Point3> {
        if x >= self.width || y >= self.height {
            return None;
        }
        self.pixel_index[y * self.width + x].map(|i| self.points[i as usize])
    }

    pub fn pixel_of(&self, point: usize) -> Pixel {
        let p = self.pixels[point] as usize;
        Pixel::new((p % self.width) as f64, (p / self.width) as f64)
    }

    /// 3D point seen at a subpixel location.
    ///
    /// Inside a fully valid 2x2 pixel cell the bilinear blend of the four
    /// points is moved onto the camera ray through `pixel`, so the point
    /// re-projects exactly onto the feature. Otherwise the point of the nearest
    /// valid pixel within one pixel is moved onto that ray.
    pub fn lift(&self, pixel: Pixel) -> Option<Point3> {
        let (u, v) = (pixel.u, pixel.v);
        if !(u.is_finite() && v.is_finite()) || u < -0.5 || v < -0.5 {
            return None;
        }
        let (x0, y0) = (u.floor(), v.floor());
        if x0 >= 0.0 && y0 >= 0.0 {
            let (x0u, y0u) = (x0 as usize, y0 as usize);
            let corners = [
                self.point_at(x0u, y0u),
                self.point_at(x0u + 1, y0u),
                self.point_at(x0u, y0u + 1),
                self.point_at(x0u + 1, y0u + 1),
            ];
            if let [Some(a), Some(b), Some(c), Some(d)] = corners {
                let (fx, fy) = (u - x0, v - y0);
                let blend = a.coords * ((1.0 - fx) * (1.0 - fy))
                    + b.coords * (fx * (1.0 - fy))
                    + c.coords * ((1.0 - fx) * fy)
                    + d.coords * (fx * fy);
                if let Some(p) = self.snap_to_ray(pixel, &Point3::from(blend)) {
                    return Some(p);
                }
            }
        }
        let mut best: Option<(f64, Point3)> = None;
        let (xr, yr) = (u.round() as isize, v.round() as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (xx, yy) = (xr + dx, yr + dy);
                if xx < 0 || yy < 0 {
                    continue;
                }
                let d = ((xx as f64 - u).powi(2) + (yy as f64 - v).powi(2)).sqrt();
                if d > 1.0 {
                    continue;
                }
                if let Some(p) = self.point_at(xx as usize, yy as usize) {
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, p));
                    }
                }
            }
        }
        best.and_then(|(_, p)| self.snap_to_ray(pixel, &p))
    }

    fn snap_to_ray(&self, pixel: Pixel, p: &Point3) -> Option<Point3> {
        let a = &self.camera.0;
        let left = a.fixed_view::<3, 3>(0, 0).into_owned();
        let inv = left.try_inverse()?;
        let center = -(inv * a.column(3));
        let dir = inv * Vector3::new(pixel.u, pixel.v, 1.0);
        let s = (p.coords - center).dot(&dir) / dir.norm_squared();
        (s > 0.0).then(|| Point3::from(center + dir * s))
    }
}

/// Decodes the stack and triangulates every pixel whose projector column
/// is valid and in range.
pub fn reconstruct_frame(
    frame_id: usize,
    stack: &CaptureStack,
    calibration: &Calibration,
    params: &PhaseParams,
) -> Result<FramePointCloud> {
    calibration.validate()?;
    let camera = calibration.camera_matrix()?;
    let projector = calibration.projector_matrix()?;
    let abs = stack.absolute_phase(params, calibration.projector.width)?;
    let coords = abs.projector_coords(calibration.projector.width);
    let w = stack.width();
    let per_pixel: Vec<Option<Point3>> = coords
        .par_iter()
        .enumerate()
        .map(|(i, u_p)| {
            let u_p = (*u_p)?;
            let pixel = Pixel::new((i % w) as f64, (i / w) as f64);
            let x = triangulate(pixel, u_p, &camera, &projector, DEFAULT_CONDITION_BOUND).ok()?;
            (calibration.camera.depth(&x) > 0.0 && calibration.projector.depth(&x) > 0.0)
                .then_some(x)
        })
        .collect();
    Ok(FramePointCloud::from_pixel_points(
        frame_id,
        &per_pixel,
        stack.texture().clone(),
        camera,
    ))
}
