//! Progressive deformable sampling of source features.
//!
//! For every source view a 3D offset moves each reference frustum point
//! before projection, a 2D head then scatters `P` sample points around the
//! projected anchor, and the bilinearly sampled features are blended first
//! across points and then across views into a new reference feature.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{homography_matrix, pixel_grid, project_tracked, stack_xy, CameraModel};
use crate::error::{MvsError, Result};
use crate::layers::conv2d_bias;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Logit added to views whose anchor projects behind the camera.
const INVALID_VIEW_LOGIT: f64 = -1e4;

/// Initial layout of the deformable sample points around the anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PointScheme {
    /// Uniform in [-1, 1]² pixels, seeded per stage.
    Random,
    /// Square convolution-kernel stencil with unit spacing.
    Kernel,
}

impl fmt::Display for PointScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PointScheme::Random => "random",
            PointScheme::Kernel => "kernel",
        })
    }
}

impl FromStr for PointScheme {
    type Err = MvsError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(PointScheme::Random),
            "kernel" => Ok(PointScheme::Kernel),
            other => Err(MvsError::invalid(format!("unknown point scheme '{other}' (random|kernel)"))),
        }
    }
}

/// Initial (dx, dy) of each sample point.
pub fn point_pattern(scheme: PointScheme, points: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if points == 0 {
        return Err(MvsError::invalid("need at least one sample point"));
    }
    match scheme {
        PointScheme::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..points)
                .map(|_| (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)))
                .collect())
        }
        PointScheme::Kernel => {
            let side = (points as f64).sqrt().round() as usize;
            if side * side != points || side % 2 == 0 {
                return Err(MvsError::invalid(format!(
                    "kernel point scheme needs an odd square point count, got {points}"
                )));
            }
            let r = (side / 2) as i64;
            Ok((-r..=r)
                .flat_map(|dy| (-r..=r).map(move |dx| (dx as f64, dy as f64)))
                .collect())
        }
    }
}

/// Bias for the 2D offset head that places the points at `pattern` when the
/// head's weights are zero: `clamp · tanh(bias) = offset`.
pub fn offset_bias(pattern: &[(f64, f64)], clamp_px: f64, extra_channels: usize) -> Result<Tensor> {
    let p = pattern.len();
    let mut data = vec![0.0; 2 * p + extra_channels];
    for (n, &(dx, dy)) in pattern.iter().enumerate() {
        for (slot, v) in [(n, dx), (p + n, dy)] {
            let r = v / clamp_px;
            if r.abs() >= 1.0 {
                return Err(MvsError::invalid(format!("pattern offset {v} exceeds clamp {clamp_px}")));
            }
            data[slot] = r.atanh();
        }
    }
    let n = data.len();
    Tensor::new(vec![n, 1, 1], data)
}

/// Learned weights of one stage's sampler (shared by all source views).
#[derive(Clone, Copy, Debug)]
pub struct PssWeights {
    /// [3, 2C, 3, 3] and [3,1,1]
    pub off3d: (Var, Var),
    /// [3P+1, 2C, 3, 3] and [3P+1,1,1]: P x-offsets, P y-offsets, P point logits, 1 view logit.
    pub off2d: (Var, Var),
    /// [1, C, 3, 3] and [1,1,1]: reference view logit.
    pub refview: (Var, Var),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PssSettings {
    pub points: usize,
    pub clamp_px: f64,
    pub use_3d: bool,
    pub use_2d: bool,
}

/// 3D frustum offsets (δx, δy in pixels, δz in meters), [3,H,W].
#[derive(Clone, Copy, Debug)]
pub struct OffsetField3D {
    pub values: Var,
}

/// 2D image-space offsets of the sample points, each [P,H,W].
#[derive(Clone, Copy, Debug)]
pub struct OffsetField2D {
    pub dx: Var,
    pub dy: Var,
}

fn check_pair(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.len() != 3 {
        return Err(MvsError::ShapeMismatch { op, lhs: sa, rhs: sb });
    }
    Ok(())
}

/// `tanh(conv(cat(ref, src)))` scaled by `clamp_px` on (δx, δy) and the
/// per-pixel `clamp_z` [H,W] on δz.
pub fn predict_offsets_3d(
    tape: &Tape,
    ref_feat: Var,
    src_feat: Var,
    weights: (Var, Var),
    clamp_px: f64,
    clamp_z: Var,
) -> Result<OffsetField3D> {
    check_pair(tape, ref_feat, src_feat, "predict_offsets_3d")?;
    let x = tape.concat(&[ref_feat, src_feat], 0)?;
    let raw = conv2d_bias(tape, x, weights.0, weights.1, 1, 1)?;
    let s = tape.shape(raw);
    if s[0] != 3 {
        return Err(MvsError::invalid(format!("3D offset head must output 3 channels, got {}", s[0])));
    }
    let hw = s[1] * s[2];
    let cz = tape.shape(clamp_z);
    if cz.iter().product::<usize>() != hw {
        return Err(MvsError::ShapeMismatch {
            op: "predict_offsets_3d clamp",
            lhs: s[1..].to_vec(),
            rhs: cz,
        });
    }
    let xy = tape.constant(Tensor::full(&[2, s[1], s[2]], clamp_px));
    let scale = tape.concat(&[xy, tape.reshape(clamp_z, &[1, s[1], s[2]])?], 0)?;
    let values = tape.mul(tape.tanh(raw), scale)?;
    Ok(OffsetField3D { values })
}

/// Returns the clamped 2D offsets, the point weights (softmax over points,
/// [P,H,W]) and the source view's aggregation logit [H,W].
pub fn predict_offsets_2d(
    tape: &Tape,
    ref_feat: Var,
    src_feat: Var,
    weights: (Var, Var),
    points: usize,
    clamp_px: f64,
) -> Result<(OffsetField2D, Var, Var)> {
    check_pair(tape, ref_feat, src_feat, "predict_offsets_2d")?;
    let x = tape.concat(&[ref_feat, src_feat], 0)?;
    let raw = conv2d_bias(tape, x, weights.0, weights.1, 1, 1)?;
    let s = tape.shape(raw);
    if s[0] != 3 * points + 1 {
        return Err(MvsError::invalid(format!(
            "2D offset head must output {} channels for {points} points, got {}",
            3 * points + 1,
            s[0]
        )));
    }
    let p = points;
    let dx = tape.mul_scalar(tape.tanh(tape.slice(raw, 0, 0, p)?), clamp_px);
    let dy = tape.mul_scalar(tape.tanh(tape.slice(raw, 0, p, 2 * p)?), clamp_px);
    let point_weights = tape.softmax(tape.slice(raw, 0, 2 * p, 3 * p)?, 0)?;
    let view_logit = tape.reshape(tape.slice(raw, 0, 3 * p, 3 * p + 1)?, &s[1..])?;
    Ok((OffsetField2D { dx, dy }, point_weights, view_logit))
}

/// Bilinear sample of `feat` [C,H,W] at `coords` [...,2]; masked positions are zero.
pub fn bilinear_sample(tape: &Tape, feat: Var, coords: Var, valid: Option<Tensor>) -> Result<Var> {
    tape.gather_bilinear(feat, coords, valid)
}

/// Inputs for one stage of deformable aggregation. Cameras are already
/// scaled to the feature resolution.
pub struct PssInput<'a> {
    pub ref_feat: Var,
    pub src_feats: &'a [Var],
    pub ref_cam: &'a CameraModel,
    pub src_cams: &'a [CameraModel],
    /// Depth at which each reference pixel's anchor is projected, [H,W].
    pub anchor_depth: Var,
    /// Per-pixel bound on |δz|, [H,W].
    pub clamp_z: Var,
}

pub struct PssOutput {
    /// Updated reference feature [C,H,W].
    pub feature: Var,
    /// Aggregation weights over (reference, sources...), [N,H,W].
    pub view_weights: Var,
    /// Projected anchors per source, [H,W,2].
    pub anchors: Vec<Tensor>,
    /// Final sample positions per source, [P,H,W,2] (or [1,H,W,2] without 2D offsets).
    pub samples: Vec<Tensor>,
}

/// Deformable aggregation of all views into a new reference feature.
///
/// The reference contributes its own feature; each source contributes the
/// point-weighted blend of its samples. View weights are a softmax over views.
pub fn pss_aggregate(tape: &Tape, input: &PssInput<'_>, weights: &PssWeights, settings: &PssSettings) -> Result<PssOutput> {
    let n_src = input.src_feats.len();
    if n_src == 0 || input.src_cams.len() != n_src {
        return Err(MvsError::invalid(format!(
            "deformable sampling needs at least 2 views with cameras, got {} features and {} cameras",
            n_src + 1,
            input.src_cams.len() + 1
        )));
    }
    let fs = tape.shape(input.ref_feat);
    let (h, w) = (fs[1], fs[2]);
    let (gx, gy) = pixel_grid(h, w);
    let (gx, gy) = (tape.constant(gx), tape.constant(gy));

    let ref_logit = conv2d_bias(tape, input.ref_feat, weights.refview.0, weights.refview.1, 1, 1)?;
    let mut logits = vec![ref_logit];
    let mut contributions = vec![input.ref_feat];
    let mut anchors = Vec::with_capacity(n_src);
    let mut samples = Vec::with_capacity(n_src);

    for (&src, cam) in input.src_feats.iter().zip(input.src_cams) {
        check_pair(tape, input.ref_feat, src, "pss_aggregate")?;
        let hom: Matrix4<f64> = homography_matrix(input.ref_cam, cam)?;
        let (x, y, z) = if settings.use_3d {
            let off = predict_offsets_3d(tape, input.ref_feat, src, weights.off3d, settings.clamp_px, input.clamp_z)?;
            let comp = |c: usize| -> Result<Var> {
                let s = tape.slice(off.values, 0, c, c + 1)?;
                tape.reshape(s, &[h, w])
            };
            (
                tape.add(gx, comp(0)?)?,
                tape.add(gy, comp(1)?)?,
                tape.add(input.anchor_depth, comp(2)?)?,
            )
        } else {
            (gx, gy, input.anchor_depth)
        };
        let (u, v, mask) = project_tracked(tape, &hom, x, y, z)?;
        let anchor = stack_xy(tape, u, v)?;
        anchors.push((*tape.value(anchor)).clone());

        let (off2d, point_weights, view_logit) =
            predict_offsets_2d(tape, input.ref_feat, src, weights.off2d, settings.points, settings.clamp_px)?;
        let y_i = if settings.use_2d {
            let px = tape.add(u, off2d.dx)?;
            let py = tape.add(v, off2d.dy)?;
            let coords = stack_xy(tape, px, py)?;
            samples.push((*tape.value(coords)).clone());
            let pmask = Tensor::from_fn(&[settings.points, h, w], |i| mask.data()[i % (h * w)]);
            let sampled = bilinear_sample(tape, src, coords, Some(pmask))?;
            let weighted = tape.mul(sampled, point_weights)?;
            tape.sum_axis(weighted, 1)?
        } else {
            samples.push(tape.value(anchor).reshape(&[1, h, w, 2])?);
            bilinear_sample(tape, src, anchor, Some(mask.clone()))?
        };
        contributions.push(y_i);

        let penalty = mask.map(|m| if m > 0.5 { 0.0 } else { INVALID_VIEW_LOGIT });
        logits.push(tape.add(view_logit, tape.constant(penalty))?);
    }

    let stacked: Vec<Var> = logits
        .iter()
        .map(|&l| tape.reshape(l, &[1, h, w]))
        .collect::<Result<_>>()?;
    let view_weights = tape.softmax(tape.concat(&stacked, 0)?, 0)?;
    let mut feature: Option<Var> = None;
    for (i, &y_i) in contributions.iter().enumerate() {
        let w_i = tape.slice(view_weights, 0, i, i + 1)?;
        let term = tape.mul(y_i, w_i)?;
        feature = Some(match feature {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(PssOutput {
        feature: feature.expect("at least the reference contributes"),
        view_weights,
        anchors,
        samples,
    })
}
