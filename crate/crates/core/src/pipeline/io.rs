//! PLY clouds, trajectory CSV and SVG trajectory plots.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};
use crate::localization::{SensorPose, Trajectory};

/// Colored points with their source frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyCloud {
    pub points: Vec<Point3>,
    pub colors: Vec<[u8; 3]>,
    pub frame_ids: Vec<u32>,
}

const PLY_HEADER_PROPS: &str = "property double x\nproperty double y\nproperty double z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\nproperty uint frame_id\n";

/// Binary little-endian PLY with double coordinates, RGB and frame id.
pub fn write_ply(path: impl AsRef<Path>, cloud: &PlyCloud) -> Result<()> {
    let path = path.as_ref();
    let n = cloud.points.len();
    if cloud.colors.len() != n || cloud.frame_ids.len() != n {
        return Err(Error::Input("PLY attribute lengths differ".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    writeln!(header, "element vertex {n}").expect("string write");
    header.push_str(PLY_HEADER_PROPS);
    header.push_str("end_header\n");
    let io = |e| Error::io(path, e);
    w.write_all(header.as_bytes()).map_err(io)?;
    for i in 0..n {
        let p = &cloud.points[i];
        for c in [p.x, p.y, p.z] {
            w.write_all(&c.to_le_bytes()).map_err(io)?;
        }
        w.write_all(&cloud.colors[i]).map_err(io)?;
        w.write_all(&cloud.frame_ids[i].to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads files produced by [`write_ply`].
pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let mut header = String::new();
    let mut count = None;
    loop {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated header"));
        }
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(
                n.trim()
                    .parse::<usize>()
                    .map_err(|_| bad("bad vertex count"))?,
            );
        }
        let end = line.trim_end() == "end_header";
        header.push_str(&line);
        if end {
            break;
        }
    }
    if !header.starts_with("ply\nformat binary_little_endian 1.0\n")
        || !header.contains(PLY_HEADER_PROPS)
    {
        return Err(bad("unsupported PLY layout"));
    }
    let n = count.ok_or_else(|| bad("missing vertex element"))?;
    let mut cloud = PlyCloud::default();
    let mut rec = [0u8; 31];
    for _ in 0..n {
        r.read_exact(&mut rec)
            .map_err(|_| bad("truncated vertex data"))?;
        let f = |k: usize| f64::from_le_bytes(rec[8 * k..8 * k + 8].try_into().expect("8 bytes"));
        cloud.points.push(Point3::new(f(0), f(1), f(2)));
        cloud.colors.push([rec[24], rec[25], rec[26]]);
        cloud
            .frame_ids
            .push(u32::from_le_bytes(rec[27..31].try_into().expect("4 bytes")));
    }
    Ok(cloud)
}

/// One CSV row: camera center in the world and the world→camera rotation,
/// row-major. The translation follows as `T = -R O_w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRow {
    pub frame_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub r00: f64,
    pub r01: f64,
    pub r02: f64,
    pub r10: f64,
    pub r11: f64,
    pub r12: f64,
    pub r20: f64,
    pub r21: f64,
    pub r22: f64,
}

impl From<&SensorPose> for PoseRow {
    fn from(p: &SensorPose) -> Self {
        let r = p.rotation();
        Self {
            frame_id: p.frame_id,
            cx: p.center.x,
            cy: p.center.y,
            cz: p.center.z,
            r00: r[(0, 0)],
            r01: r[(0, 1)],
            r02: r[(0, 2)],
            r10: r[(1, 0)],
            r11: r[(1, 1)],
            r12: r[(1, 2)],
            r20: r[(2, 0)],
            r21: r[(2, 1)],
            r22: r[(2, 2)],
        }
    }
}

impl PoseRow {
    pub fn to_pose(&self) -> SensorPose {
        let r = Matrix3::new(
            self.r00, self.r01, self.r02, self.r10, self.r11, self.r12, self.r20, self.r21,
            self.r22,
        );
        let t = -(r * Vector3::new(self.cx, self.cy, self.cz));
        SensorPose::new(self.frame_id, self.frame_id, RigidTransform::new(r, t))
    }
}

pub fn write_trajectory_csv(path: impl AsRef<Path>, poses: &[SensorPose]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for p in poses {
        w.serialize(PoseRow::from(p))
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut poses = Vec::new();
    for row in r.deserialize::<PoseRow>() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let pose = row.to_pose();
        pose.world_to_camera
            .validate()
            .map_err(|e| Error::Data(format!("{}: frame {}: {e}", path.display(), row.frame_id)))?;
        poses.push(pose);
    }
    Trajectory::new(poses)
}

/// Row of a world←sensor pose file: frame id and the 3×4 matrix row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorPoseRow {
    pub frame_id: usize,
    pub m00: f64,
    pub m01: f64,
    pub m02: f64,
    pub m03: f64,
    pub m10: f64,
    pub m11: f64,
    pub m12: f64,
    pub m13: f64,
    pub m20: f64,
    pub m21: f64,
    pub m22: f64,
    pub m23: f64,
}

impl SensorPoseRow {
    pub fn new(frame_id: usize, t: &RigidTransform) -> Self {
        let m = t.to_row_major();
        Self {
            frame_id,
            m00: m[0],
            m01: m[1],
            m02: m[2],
            m03: m[3],
            m10: m[4],
            m11: m[5],
            m12: m[6],
            m13: m[7],
            m20: m[8],
            m21: m[9],
            m22: m[10],
            m23: m[11],
        }
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_row_major(&[
            self.m00, self.m01, self.m02, self.m03, self.m10, self.m11, self.m12, self.m13,
            self.m20, self.m21, self.m22, self.m23,
        ])
    }
}

pub fn write_sensor_poses(path: impl AsRef<Path>, poses: &[(usize, RigidTransform)]) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for (id, t) in poses {
        w.serialize(SensorPoseRow::new(*id, t)).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sensor_poses(path: impl AsRef<Path>) -> Result<Vec<(usize, RigidTransform)>> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut out = Vec::new();
    for row in r.deserialize::<SensorPoseRow>() {
        let row = row.map_err(err)?;
        let t = row.transform();
        t.validate()
            .map_err(|e| Error::Data(format!("{}: frame {}: {e}", path.display(), row.frame_id)))?;
        out.push((row.frame_id, t));
    }
    Ok(out)
}

/// Top-down plot of estimated (and optionally true) camera centers. Both
/// are drawn in the plane of the first two principal axes of the reference
/// set.
pub fn trajectory_svg(estimated: &[Point3], truth: Option<&[Point3]>) -> String {
    let reference = truth.unwrap_or(estimated);
    let (origin, ax, ay) = principal_plane(reference);
    let flat = |pts: &[Point3]| -> Vec<(f64, f64)> {
        pts.iter()
            .map(|p| {
                let d = p - origin;
                (d.dot(&ax), d.dot(&ay))
            })
            .collect()
    };
    let est = flat(estimated);
    let gt = truth.map(flat);
    let all = est.iter().chain(gt.iter().flatten());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let size = 600.0;
    let margin = 40.0;
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let scale = (size - 2.0 * margin) / span;
    let map = |(x, y): (f64, f64)| (margin + (x - x0) * scale, size - margin - (y - y0) * scale);
    let polyline = |pts: &[(f64, f64)]| {
        pts.iter()
            .map(|&p| {
                let (u, v) = map(p);
                format!("{u:.3},{v:.3}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )
    .expect("string write");
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if let Some(gt) = &gt {
        writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#888888" stroke-width="2" stroke-dasharray="6 4"/>"##,
            polyline(gt)
        )
        .expect("string write");
    }
    writeln!(
        svg,
        r##"<polyline points="{}" fill="none" stroke="#1f5fbf" stroke-width="1.5"/>"##,
        polyline(&est)
    )
    .expect("string write");
    for &p in &est {
        let (u, v) = map(p);
        writeln!(
            svg,
            r##"<circle cx="{u:.3}" cy="{v:.3}" r="2.5" fill="#1f5fbf"/>"##
        )
        .expect("string write");
    }
    if let Some(&first) = est.first() {
        let (u, v) = map(first);
        writeln!(svg, r##"<circle cx="{u:.3}" cy="{v:.3}" r="5" fill="none" stroke="#c03030" stroke-width="2"/>"##)
            .expect("string write");
    }
    writeln!(
        svg,
        r##"<text x="{margin}" y="20" font-family="sans-serif" font-size="13">estimated (blue){}; scale bar {:.1} mm</text>"##,
        if gt.is_some() { ", ground truth (gray)" } else { "" },
        span / 4.0
    )
    .expect("string write");
    let bar = span / 4.0 * scale;
    writeln!(
        svg,
        r#"<line x1="{margin}" y1="{y:.3}" x2="{x2:.3}" y2="{y:.3}" stroke="black" stroke-width="2"/>"#,
        y = size - 15.0,
        x2 = margin + bar
    )
    .expect("string write");
    svg.push_str("</svg>\n");
    svg
}

/// Centroid and the two dominant principal directions; falls back to the
/// x/z axes when the spread is degenerate.
fn principal_plane(points: &[Point3]) -> (Point3, Vector3<f64>, Vector3<f64>) {
    if points.is_empty() {
        return (Point3::origin(), Vector3::x(), Vector3::z());
    }
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / points.len() as f64;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        a + (p.coords - c) * (p.coords - c).transpose()
    });
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let ev = |k: usize| eig.eigenvectors.column(order[k]).into_owned();
    if !(eig.eigenvalues[order[1]] > 1e-12 * eig.eigenvalues[order[0]].max(1e-300)) {
        let a = if eig.eigenvalues[order[0]] > 0.0 {
            ev(0)
        } else {
            Vector3::x()
        };
        let helper = if a.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::z()
        };
        let b = a.cross(&helper).normalize();
        return (Point3::from(c), a, b);
    }
    // Sign-fix the axes so the plot does not depend on the eigen solver.
    let fix = |v: Vector3<f64>| {
        let k = v.iamax();
        if v[k] < 0.0 {
            -v
        } else {
            v
        }
    };
    (Point3::from(c), fix(ev(0)), fix(ev(1)))
}
