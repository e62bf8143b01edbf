//! Pinhole camera algebra: intrinsic scaling, plane-sweep homographies and
//! projection of reference frustum grids into source images.
//!
//! Pixel coordinates address pixel centres: `(0, 0)` is the centre of the
//! top-left pixel and `x` runs along image columns.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{MvsError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Transformed depths at or below this are treated as behind the camera.
pub const MIN_PROJECTED_DEPTH: f64 = 1e-6;

const RIGID_TOL: f64 = 1e-6;

/// Intrinsics `k`, world-to-camera extrinsic `t`, and the depth sweep metadata
/// carried by MVSNet-style camera files.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub k: Matrix3<f64>,
    pub t: Matrix4<f64>,
    pub depth_min: f64,
    pub depth_interval: f64,
    pub num_planes: usize,
}

impl CameraModel {
    pub fn new(k: Matrix3<f64>, t: Matrix4<f64>, depth_min: f64, depth_interval: f64, num_planes: usize) -> Result<Self> {
        let cam = CameraModel {
            k,
            t,
            depth_min,
            depth_interval,
            num_planes,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.k;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(MvsError::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                k[(0, 0)],
                k[(1, 1)]
            )));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(MvsError::InvalidCamera(format!("intrinsic matrix is not upper-triangular with K[2][2]=1: {k}")));
        }
        let r = self.rotation();
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth > RIGID_TOL || (r.determinant() - 1.0).abs() > RIGID_TOL {
            return Err(MvsError::InvalidCamera("extrinsic rotation is not a proper rotation".into()));
        }
        let last = self.t.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(MvsError::InvalidCamera("extrinsic last row must be [0,0,0,1]".into()));
        }
        self.validate_depth()
    }

    pub fn validate_depth(&self) -> Result<()> {
        if !(self.depth_min > 0.0 && self.depth_interval > 0.0 && self.num_planes >= 2) {
            return Err(MvsError::InvalidCamera(format!(
                "depth metadata must be positive (min={}, interval={}, planes={})",
                self.depth_min, self.depth_interval, self.num_planes
            )));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.t.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.t.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn depth_max(&self) -> f64 {
        self.depth_min + self.depth_interval * (self.num_planes - 1) as f64
    }

    /// World point to (x, y, depth) in this camera's pixel frame.
    pub fn project(&self, world: &Vector3<f64>) -> (f64, f64, f64) {
        let cam = self.rotation() * world + self.translation();
        let p = self.k * cam;
        (p.x / p.z, p.y / p.z, cam.z)
    }

    /// Pixel (x, y) at camera depth `z` back to world coordinates.
    pub fn lift(&self, x: f64, y: f64, z: f64) -> Vector3<f64> {
        let k_inv = intrinsic_inverse(&self.k);
        let ray = k_inv * Vector3::new(x, y, 1.0);
        let cam = ray * z;
        self.rotation().transpose() * (cam - self.translation())
    }
}

/// Inverse of an upper-triangular intrinsic matrix with unit `K[2][2]`.
pub fn intrinsic_inverse(k: &Matrix3<f64>) -> Matrix3<f64> {
    let (fx, s, cx) = (k[(0, 0)], k[(0, 1)], k[(0, 2)]);
    let (fy, cy) = (k[(1, 1)], k[(1, 2)]);
    Matrix3::new(
        1.0 / fx,
        -s / (fx * fy),
        (s * cy - cx * fy) / (fx * fy),
        0.0,
        1.0 / fy,
        -cy / fy,
        0.0,
        0.0,
        1.0,
    )
}

/// Inverse of a rigid 4x4 transform `[R t; 0 1]`.
pub fn rigid_inverse(t: &Matrix4<f64>) -> Matrix4<f64> {
    let r = t.fixed_view::<3, 3>(0, 0).transpose();
    let tr = -(r * t.fixed_view::<3, 1>(0, 3));
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&tr);
    out
}

fn embed(k: &Matrix3<f64>) -> Matrix4<f64> {
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(k);
    out
}

/// Scales focal lengths and principal point by `factor`; extrinsics are untouched.
pub fn scale_intrinsics(cam: &CameraModel, factor: f64) -> Result<CameraModel> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(MvsError::invalid(format!("intrinsic scale factor must be positive, got {factor}")));
    }
    let mut out = cam.clone();
    for c in 0..3 {
        out.k[(0, c)] *= factor;
        out.k[(1, c)] *= factor;
    }
    Ok(out)
}

/// `K_src · T_src · T_ref⁻¹ · K_ref⁻¹` with each `K` embedded block-diagonally in 4x4.
/// Maps homogeneous reference points `(x·z, y·z, z, 1)` to source `(u·z', v·z', z', 1)`.
pub fn homography_matrix(reference: &CameraModel, source: &CameraModel) -> Result<Matrix4<f64>> {
    for cam in [reference, source] {
        if cam.k[(0, 0)] == 0.0 || cam.k[(1, 1)] == 0.0 {
            return Err(MvsError::InvalidCamera("singular intrinsic matrix".into()));
        }
    }
    let k_ref_inv = embed(&intrinsic_inverse(&reference.k));
    Ok(embed(&source.k) * source.t * rigid_inverse(&reference.t) * k_ref_inv)
}

/// Reference frustum sample points: `coords[i, h, w] = (w, h, depth_i(h, w))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumGrid {
    pub coords: Tensor,
}

impl FrustumGrid {
    pub fn planes(&self) -> usize {
        self.coords.shape()[0]
    }
}

/// Builds the frustum grid from hypothesis depths `planes` [D,H,W].
pub fn build_frustum_grid(planes: &Tensor) -> Result<FrustumGrid> {
    let s = planes.shape();
    if s.len() != 3 {
        return Err(MvsError::invalid(format!("hypothesis must be [D,H,W], got {s:?}")));
    }
    if let Some(bad) = planes.data().iter().find(|&&z| !(z > 0.0)) {
        return Err(MvsError::invalid(format!("hypothesized depth must be positive, got {bad}")));
    }
    let (h, w) = (s[1], s[2]);
    let coords = Tensor::from_fn(&[s[0], h, w, 3], |i| {
        let (p, comp) = (i / 3, i % 3);
        match comp {
            0 => (p % w) as f64,
            1 => ((p / w) % h) as f64,
            _ => planes.data()[p],
        }
    });
    Ok(FrustumGrid { coords })
}

/// Applies `hom` to homogeneous `(x·z, y·z, z, 1)` points. Returns source pixel
/// coordinates [D,H,W,2] and a validity mask [D,H,W] (transformed depth > ε).
pub fn project_grid(hom: &Matrix4<f64>, grid: &FrustumGrid) -> (Tensor, Tensor) {
    let n = grid.coords.numel() / 3;
    let lead = grid.coords.shape()[..3].to_vec();
    let mut out = Vec::with_capacity(2 * n);
    let mut mask = Vec::with_capacity(n);
    let c = grid.coords.data();
    for p in 0..n {
        let (x, y, z) = (c[3 * p], c[3 * p + 1], c[3 * p + 2]);
        let q = hom * Vector4::new(x * z, y * z, z, 1.0);
        if q.z > MIN_PROJECTED_DEPTH {
            out.push(q.x / q.z);
            out.push(q.y / q.z);
            mask.push(1.0);
        } else {
            out.push(0.0);
            out.push(0.0);
            mask.push(0.0);
        }
    }
    let mut shape = lead.clone();
    shape.push(2);
    (
        Tensor::new(shape, out).expect("sized above"),
        Tensor::new(lead, mask).expect("sized above"),
    )
}

/// Differentiable projection of reference points `(x, y, z)` (broadcast-compatible
/// Vars) through `hom`. Returns source `(u, v)` Vars and the validity mask.
/// Invalid positions have their denominator replaced by 1 so gradients stay finite.
pub fn project_tracked(tape: &Tape, hom: &Matrix4<f64>, x: Var, y: Var, z: Var) -> Result<(Var, Var, Tensor)> {
    let xz = tape.mul(x, z)?;
    let yz = tape.mul(y, z)?;
    let row = |r: usize| -> Result<Var> {
        let a = tape.mul_scalar(xz, hom[(r, 0)]);
        let b = tape.mul_scalar(yz, hom[(r, 1)]);
        let c = tape.mul_scalar(z, hom[(r, 2)]);
        let s = tape.add(tape.add(a, b)?, c)?;
        Ok(tape.add_scalar(s, hom[(r, 3)]))
    };
    let (px, py, pz) = (row(0)?, row(1)?, row(2)?);
    let zv = tape.value(pz);
    let mask = zv.map(|d| if d > MIN_PROJECTED_DEPTH { 1.0 } else { 0.0 });
    let fill = mask.map(|m| 1.0 - m);
    let m = tape.constant(mask.clone());
    let f = tape.constant(fill);
    let safe = tape.add(tape.mul(pz, m)?, f)?;
    Ok((tape.div(px, safe)?, tape.div(py, safe)?, mask))
}

/// Stacks two equally shaped Vars into a trailing coordinate axis of size 2.
pub fn stack_xy(tape: &Tape, u: Var, v: Var) -> Result<Var> {
    let mut shape = tape.shape(u);
    shape.push(1);
    let u1 = tape.reshape(u, &shape)?;
    let v1 = tape.reshape(v, &shape)?;
    tape.concat(&[u1, v1], shape.len() - 1)
}

/// Pixel-centre column and row index tensors of shape [H,W].
pub fn pixel_grid(h: usize, w: usize) -> (Tensor, Tensor) {
    (
        Tensor::from_fn(&[h, w], |i| (i % w) as f64),
        Tensor::from_fn(&[h, w], |i| (i / w) as f64),
    )
}

/// Look-at extrinsic for a camera at `eye` whose optical axis points at `target`.
/// Image rows run along `down` projected orthogonal to the axis.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Matrix4<f64>> {
    let z = target - eye;
    let zn = z.norm();
    if zn == 0.0 {
        return Err(MvsError::InvalidCamera("camera centre coincides with its target".into()));
    }
    let z = z / zn;
    let y = down - z * down.dot(&z);
    let yn = y.norm();
    if yn < 1e-9 {
        return Err(MvsError::InvalidCamera("down vector is parallel to the optical axis".into()));
    }
    let y = y / yn;
    let x = y.cross(&z);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let t = -(r * eye);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    Ok(m)
}
