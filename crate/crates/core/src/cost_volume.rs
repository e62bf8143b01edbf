//! Plane-sweep warping, variance cost and probability regularisation.

use crate::camera::{homography_matrix, pixel_grid, project_tracked, stack_xy, CameraModel};
use crate::error::{MvsError, Result};
use crate::layers::conv3d_bias;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default cost where fewer than two views observe a hypothesis.
pub const EMPTY_COST: f64 = 10.0;

/// Warped source features [C,D,H,W] with a validity mask [D,H,W].
#[derive(Clone, Debug)]
pub struct FeatureVolume {
    pub values: Var,
    pub mask: Tensor,
}

/// Warps `src_feat` [C,H,W] onto the reference hypotheses `planes` [D,H,W].
/// A hypothesis is valid when it lies in front of the source camera and
/// projects inside the source image.
pub fn warp_to_volume(
    tape: &Tape,
    src_feat: Var,
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
    planes: Var,
) -> Result<FeatureVolume> {
    let fs = tape.shape(src_feat);
    let ps = tape.shape(planes);
    if fs.len() != 3 || ps.len() != 3 || fs[1..] != ps[1..] {
        return Err(MvsError::ShapeMismatch {
            op: "warp_to_volume",
            lhs: fs,
            rhs: ps,
        });
    }
    let (d, h, w) = (ps[0], ps[1], ps[2]);
    let hom = homography_matrix(ref_cam, src_cam)?;
    let (gx, gy) = pixel_grid(h, w);
    let gx = tape.constant(Tensor::from_fn(&[d, h, w], |i| gx.data()[i % (h * w)]));
    let gy = tape.constant(Tensor::from_fn(&[d, h, w], |i| gy.data()[i % (h * w)]));
    let (u, v, front) = project_tracked(tape, &hom, gx, gy, planes)?;
    let (uv, vv) = (tape.value(u), tape.value(v));
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    let mask = Tensor::from_fn(&[d, h, w], |i| {
        let (x, y) = (uv.data()[i], vv.data()[i]);
        let inside = front.data()[i] > 0.5 && x >= 0.0 && x <= wmax && y >= 0.0 && y <= hmax;
        if inside {
            1.0
        } else {
            0.0
        }
    });
    let coords = stack_xy(tape, u, v)?;
    let values = tape.gather_bilinear(src_feat, coords, Some(mask.clone()))?;
    Ok(FeatureVolume { values, mask })
}

/// Per-hypothesis variance across the reference feature [C,H,W] (broadcast
/// over depth) and every valid source sample. Invariant to source order.
/// Positions with fewer than two contributors get `empty_cost`.
pub fn variance_cost(tape: &Tape, reference: Var, volumes: &[FeatureVolume], empty_cost: f64) -> Result<Var> {
    let pairs: Vec<(Var, Tensor)> = volumes.iter().map(|v| (v.values, v.mask.clone())).collect();
    tape.variance(reference, &pairs, empty_cost)
}

/// How the cost volume [C,D,H,W] becomes per-plane logits.
#[derive(Clone, Debug)]
pub enum Regularizer {
    /// 3D conv stack (weight, bias) with ReLU between layers; the last layer outputs 1 channel.
    Learned(Vec<(Var, Var)>),
    /// Logits are `-gain · mean_c(cost)`.
    Bypass { gain: f64 },
}

/// Softmax over planes of the negated regularised cost. Returns [D,H,W].
pub fn regularize(tape: &Tape, cost: Var, reg: &Regularizer) -> Result<Var> {
    let s = tape.shape(cost);
    if s.len() != 4 {
        return Err(MvsError::invalid(format!("cost volume must be [C,D,H,W], got {s:?}")));
    }
    let score = match reg {
        Regularizer::Learned(layers) => {
            if layers.is_empty() {
                return Err(MvsError::invalid("learned regularizer has no layers"));
            }
            let mut x = cost;
            for (i, &(w, b)) in layers.iter().enumerate() {
                x = conv3d_bias(tape, x, w, b, 1)?;
                if i + 1 < layers.len() {
                    x = tape.relu(x);
                }
            }
            let xs = tape.shape(x);
            if xs[0] != 1 {
                return Err(MvsError::invalid(format!("regularizer must end with 1 channel, got {}", xs[0])));
            }
            tape.reshape(x, &xs[1..])?
        }
        Regularizer::Bypass { gain } => tape.mul_scalar(tape.mean_axis(cost, 0)?, *gain),
    };
    tape.softmax(tape.neg(score), 0)
}
