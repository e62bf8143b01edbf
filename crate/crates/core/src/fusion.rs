//! Depth-map fusion into a coloured point cloud, and ASCII PLY I/O.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::camera::CameraModel;
use crate::error::{MvsError, Result};
use crate::formats::RgbImage;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn push(&mut self, p: Vector3<f64>, c: [u8; 3]) {
        self.points.push([p.x, p.y, p.z]);
        self.colors.push(c);
    }
}

fn depth_at(depth: &Tensor, x: usize, y: usize) -> Option<f64> {
    let d = depth.data()[y * depth.shape()[1] + x];
    (d.is_finite() && d > 0.0).then_some(d)
}

fn check_view(depth: &Tensor, cam: &CameraModel, image: &RgbImage) -> Result<()> {
    cam.validate()?;
    if depth.shape() != [image.height, image.width] {
        return Err(MvsError::ShapeMismatch {
            op: "backproject",
            lhs: depth.shape().to_vec(),
            rhs: vec![image.height, image.width],
        });
    }
    Ok(())
}

/// Lifts every pixel with a finite positive depth to world space, row-major.
pub fn backproject(depth: &Tensor, cam: &CameraModel, image: &RgbImage) -> Result<PointCloud> {
    check_view(depth, cam, image)?;
    let mut cloud = PointCloud::default();
    for y in 0..image.height {
        for x in 0..image.width {
            if let Some(d) = depth_at(depth, x, y) {
                cloud.push(cam.lift(x as f64, y as f64, d), image.pixel(x, y));
            }
        }
    }
    Ok(cloud)
}

/// One view's depth estimate, camera and colours.
#[derive(Clone, Debug)]
pub struct FusionView {
    pub depth: Tensor,
    pub cam: CameraModel,
    pub image: RgbImage,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionParams {
    pub reproj_px_tol: f64,
    pub depth_rel_tol: f64,
    pub min_views: usize,
    /// Dedup voxel edge in metres; `None` uses half the ground sampling
    /// distance and `Some(0.0)` disables dedup.
    pub voxel: Option<f64>,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            reproj_px_tol: 1.0,
            depth_rel_tol: 0.01,
            min_views: 2,
            voxel: None,
        }
    }
}

/// Mean over views of median depth divided by mean focal length.
pub fn ground_sampling_distance(views: &[FusionView]) -> f64 {
    let per_view: Vec<f64> = views
        .iter()
        .filter_map(|v| {
            let mut d: Vec<f64> = v.depth.data().iter().copied().filter(|d| d.is_finite() && *d > 0.0).collect();
            if d.is_empty() {
                return None;
            }
            d.sort_by(f64::total_cmp);
            let f = 0.5 * (v.cam.k[(0, 0)] + v.cam.k[(1, 1)]);
            Some(d[d.len() / 2] / f)
        })
        .collect();
    if per_view.is_empty() {
        1.0
    } else {
        per_view.iter().sum::<f64>() / per_view.len() as f64
    }
}

/// Whether view `j` confirms world point `p` seen at pixel (x, y), depth `d` in view `i`.
fn confirms(i: &FusionView, j: &FusionView, p: &Vector3<f64>, x: f64, y: f64, d: f64, params: &FusionParams) -> bool {
    let (u, v, z) = j.cam.project(p);
    if !(z > 0.0) {
        return false;
    }
    let (qx, qy) = ((u + 0.5).floor(), (v + 0.5).floor());
    if qx < 0.0 || qy < 0.0 || qx >= j.image.width as f64 || qy >= j.image.height as f64 {
        return false;
    }
    let Some(dj) = depth_at(&j.depth, qx as usize, qy as usize) else {
        return false;
    };
    let back = j.cam.lift(qx, qy, dj);
    let (bx, by, bz) = i.cam.project(&back);
    let reproj = ((bx - x).powi(2) + (by - y).powi(2)).sqrt();
    reproj < params.reproj_px_tol && (bz - d).abs() / d < params.depth_rel_tol
}

/// Keeps each view's points confirmed by at least `min_views − 1` other views,
/// then drops points falling in an already occupied voxel. Views are visited
/// in order, pixels row-major.
pub fn consistency_filter(views: &[FusionView], params: &FusionParams) -> Result<PointCloud> {
    if views.len() < 2 {
        return Err(MvsError::invalid(format!("fusion needs at least 2 views, got {}", views.len())));
    }
    for v in views {
        check_view(&v.depth, &v.cam, &v.image)?;
    }
    let voxel = params.voxel.unwrap_or_else(|| 0.5 * ground_sampling_distance(views));
    if !(voxel >= 0.0) {
        return Err(MvsError::invalid(format!("voxel size must be non-negative, got {voxel}")));
    }
    let need = params.min_views.saturating_sub(1);
    let mut seen = HashSet::new();
    let mut cloud = PointCloud::default();
    for (a, view) in views.iter().enumerate() {
        for y in 0..view.image.height {
            for x in 0..view.image.width {
                let Some(d) = depth_at(&view.depth, x, y) else { continue };
                let p = view.cam.lift(x as f64, y as f64, d);
                let votes = views
                    .iter()
                    .enumerate()
                    .filter(|&(b, other)| b != a && confirms(view, other, &p, x as f64, y as f64, d, params))
                    .count();
                if votes < need {
                    continue;
                }
                let key = [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64];
                if voxel == 0.0 || seen.insert(key) {
                    cloud.push(p, view.image.pixel(x, y));
                }
            }
        }
    }
    Ok(cloud)
}

pub fn encode_ply(cloud: &PointCloud) -> Result<String> {
    if cloud.points.len() != cloud.colors.len() {
        return Err(MvsError::invalid("point cloud has mismatched point and colour counts"));
    }
    if let Some(p) = cloud.points.iter().find(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(MvsError::invalid(format!("non-finite point {p:?}")));
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    for axis in ["x", "y", "z"] {
        let _ = writeln!(s, "property double {axis}");
    }
    for c in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {c}");
    }
    s.push_str("end_header\n");
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let _ = writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    Ok(s)
}

const PLY_PROPS: [&str; 6] = ["x", "y", "z", "red", "green", "blue"];

/// Parses the ASCII layout written by [`encode_ply`]. Comment lines are
/// skipped and `float` is accepted for coordinates.
pub fn decode_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, msg: String| MvsError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with("comment") && !l.starts_with("obj_info"));
    let mut expect = |want: &str| -> Result<(usize, &str)> {
        match lines.next() {
            Some((n, l)) if l.starts_with(want) => Ok((n, l)),
            Some((n, l)) => Err(err(n, format!("expected '{want}', got '{l}'"))),
            None => Err(err(0, format!("unexpected end of file, expected '{want}'"))),
        }
    };
    let (n, magic) = expect("ply")?;
    if magic != "ply" {
        return Err(err(n, "missing 'ply' magic".into()));
    }
    let (n, fmt) = expect("format")?;
    if fmt.split_whitespace().collect::<Vec<_>>() != ["format", "ascii", "1.0"] {
        return Err(err(n, format!("unsupported format line '{fmt}'")));
    }
    let (n, elem) = expect("element")?;
    let count: usize = match elem.split_whitespace().collect::<Vec<_>>()[..] {
        ["element", "vertex", c] => c.parse().map_err(|_| err(n, format!("invalid vertex count '{c}'")))?,
        _ => return Err(err(n, format!("expected 'element vertex N', got '{elem}'"))),
    };
    for (k, name) in PLY_PROPS.iter().enumerate() {
        let (n, prop) = expect("property")?;
        let parts: Vec<&str> = prop.split_whitespace().collect();
        let types: &[&str] = if k < 3 { &["double", "float", "float64", "float32"] } else { &["uchar", "uint8"] };
        if parts.len() != 3 || !types.contains(&parts[1]) || parts[2] != *name {
            return Err(err(n, format!("expected property {name}, got '{prop}'")));
        }
    }
    expect("end_header")?;
    let mut cloud = PointCloud::default();
    for _ in 0..count {
        let (n, row) = lines.next().ok_or_else(|| err(0, format!("expected {count} vertices")))?;
        let f: Vec<&str> = row.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(n, format!("vertex needs 6 values, got {}", f.len())));
        }
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = f[k].parse().map_err(|_| err(n, format!("invalid coordinate '{}'", f[k])))?;
        }
        let mut c = [0u8; 3];
        for k in 0..3 {
            c[k] = f[3 + k].parse().map_err(|_| err(n, format!("invalid colour '{}'", f[3 + k])))?;
        }
        cloud.points.push(p);
        cloud.colors.push(c);
    }
    if let Some((n, extra)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(err(n, format!("unexpected data after vertices: '{extra}'")));
    }
    Ok(cloud)
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ply(cloud)?).map_err(|e| MvsError::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| MvsError::io(path, e))?;
    decode_ply(&text, path)
}
