//! Depth hypotheses: expectation regression, spread of the hypothesis
//! distribution, uncertainty-driven depth ranges and the three interval
//! schemes (uniform, log-uniform, centred linear-increasing).
//!
//! The tracked functions operate on tape values so the whole cascade stays
//! differentiable; the `*_plain` helpers wrap them for untracked tensors.

use std::fmt;
use std::str::FromStr;

use crate::camera::CameraModel;
use crate::error::{MvsError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How a depth range is split into hypothesis planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IntervalScheme {
    /// Uniform spacing, endpoints included.
    Ud,
    /// Spacing increasing geometrically (uniform in log depth).
    Sid,
    /// Spacing growing linearly away from the predicted depth.
    Clid,
}

impl IntervalScheme {
    pub const ALL: [IntervalScheme; 3] = [IntervalScheme::Ud, IntervalScheme::Sid, IntervalScheme::Clid];
}

impl fmt::Display for IntervalScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntervalScheme::Ud => "ud",
            IntervalScheme::Sid => "sid",
            IntervalScheme::Clid => "clid",
        })
    }
}

impl FromStr for IntervalScheme {
    type Err = MvsError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ud" => Ok(IntervalScheme::Ud),
            "sid" => Ok(IntervalScheme::Sid),
            "clid" => Ok(IntervalScheme::Clid),
            other => Err(MvsError::invalid(format!("unknown interval scheme '{other}' (ud|sid|clid)"))),
        }
    }
}

/// Per-pixel hypothesized depths [d, H, W] for one cascade stage.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthHypothesis {
    pub planes: Tensor,
    pub stage: usize,
}

impl DepthHypothesis {
    pub fn new(planes: Tensor, stage: usize) -> Result<Self> {
        check_planes(&planes)?;
        Ok(DepthHypothesis { planes, stage })
    }

    pub fn num_planes(&self) -> usize {
        self.planes.shape()[0]
    }

    /// Mean over pixels of `(last - first) / (d - 1)`.
    pub fn mean_interval(&self) -> f64 {
        mean_interval(&self.planes)
    }
}

/// Probability of each hypothesis plane per pixel, [d, H, W].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    pub probs: Tensor,
}

impl ProbabilityVolume {
    pub fn new(probs: Tensor) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 3 {
            return Err(MvsError::invalid(format!("probability volume must be [d,H,W], got {s:?}")));
        }
        let hw = s[1] * s[2];
        for p in 0..hw {
            let mut total = 0.0;
            for d in 0..s[0] {
                let v = probs.data()[d * hw + p];
                if v < 0.0 {
                    return Err(MvsError::invalid(format!("negative probability {v}")));
                }
                total += v;
            }
            if (total - 1.0).abs() > 1e-6 {
                return Err(MvsError::invalid(format!("probabilities at pixel {p} sum to {total}")));
            }
        }
        Ok(ProbabilityVolume { probs })
    }
}

/// Expected depth and the standard deviation of the hypothesis distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthEstimate {
    pub depth: Tensor,
    pub sigma: Tensor,
}

fn check_planes(planes: &Tensor) -> Result<()> {
    let s = planes.shape();
    if s.len() != 3 || s[0] < 1 {
        return Err(MvsError::invalid(format!("hypothesis planes must be [d,H,W], got {s:?}")));
    }
    let hw = s[1] * s[2];
    let x = planes.data();
    for p in 0..hw {
        for d in 0..s[0] {
            let z = x[d * hw + p];
            if !(z > 0.0) {
                return Err(MvsError::invalid(format!("hypothesis depth must be positive, got {z}")));
            }
            if d > 0 && !(z > x[(d - 1) * hw + p]) {
                return Err(MvsError::invalid(format!("hypothesis planes not strictly increasing at pixel {p}")));
            }
        }
    }
    Ok(())
}

pub(crate) fn mean_interval(planes: &Tensor) -> f64 {
    let s = planes.shape();
    let (d, hw) = (s[0], s[1] * s[2]);
    if d < 2 {
        return 0.0;
    }
    let x = planes.data();
    let total: f64 = (0..hw).map(|p| x[(d - 1) * hw + p] - x[p]).sum();
    total / (hw as f64 * (d - 1) as f64)
}

/// `D(x) = Σ_i R_i(x) · P_i(x)`.
pub fn regress_depth(tape: &Tape, planes: Var, prob: Var) -> Result<Var> {
    if tape.shape(planes) != tape.shape(prob) {
        return Err(MvsError::ShapeMismatch {
            op: "regress_depth",
            lhs: tape.shape(planes),
            rhs: tape.shape(prob),
        });
    }
    tape.sum_axis(tape.mul(planes, prob)?, 0)
}

/// `σ(x) = sqrt(Σ_i P_i(x) · (R_i(x) − D(x))²)`.
pub fn hypothesis_variance(tape: &Tape, planes: Var, prob: Var, depth: Var) -> Result<Var> {
    let dev = tape.sub(planes, depth)?;
    let s = tape.sum_axis(tape.mul(prob, tape.square(dev))?, 0)?;
    Ok(tape.sqrt(tape.max_const(s, 0.0)))
}

/// Limits used when turning (depth, σ) into a depth range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeParams {
    pub eta: f64,
    /// σ below this is raised to it before scaling by `eta`.
    pub sigma_min: f64,
    /// Lower bound of any range, meters.
    pub depth_floor: f64,
}

/// `[D − η·max(σ, σ_min), D + η·max(σ, σ_min)]`, lower end floored at `depth_floor`.
pub fn deform_range(tape: &Tape, depth: Var, sigma: Var, p: &RangeParams) -> Result<(Var, Var)> {
    if !(p.eta > 0.0) {
        return Err(MvsError::invalid(format!("eta must be positive, got {}", p.eta)));
    }
    let half = tape.mul_scalar(tape.max_const(sigma, p.sigma_min), p.eta);
    let lower = tape.max_const(tape.sub(depth, half)?, p.depth_floor);
    let upper = tape.add(depth, half)?;
    Ok((lower, upper))
}

/// [`deform_range`] with a tracked σ floor (any shape broadcastable to `sigma`).
pub fn deform_range_tracked(
    tape: &Tape,
    depth: Var,
    sigma: Var,
    sigma_min: Var,
    eta: f64,
    depth_floor: f64,
) -> Result<(Var, Var)> {
    if !(eta > 0.0) {
        return Err(MvsError::invalid(format!("eta must be positive, got {eta}")));
    }
    let half = tape.mul_scalar(tape.maximum(sigma, sigma_min)?, eta);
    let lower = tape.max_const(tape.sub(depth, half)?, depth_floor);
    let upper = tape.add(depth, half)?;
    Ok((lower, upper))
}

/// Offsets of the centred linear-increasing scheme in units of the half-width,
/// ascending: `−c_half … −c_1, c_1 … c_half` with `c_i = i(i+1) / (half(half+1))`.
pub fn clid_offsets(planes: usize) -> Result<Vec<f64>> {
    if planes < 2 || planes % 2 != 0 {
        return Err(MvsError::invalid(format!("centred discretization needs an even plane count, got {planes}")));
    }
    let half = planes / 2;
    let denom = (half * (half + 1)) as f64;
    let up: Vec<f64> = (1..=half).map(|i| (i * (i + 1)) as f64 / denom).collect();
    Ok(up.iter().rev().map(|c| -c).chain(up.iter().copied()).collect())
}

/// Splits `[lower, upper]` (per pixel, [H,W]) into `planes` hypotheses.
/// The centred scheme uses `depth` as the centre and the smaller of the two
/// half-widths so the planes stay symmetric and inside the range.
pub fn discretize(
    tape: &Tape,
    lower: Var,
    upper: Var,
    depth: Var,
    planes: usize,
    scheme: IntervalScheme,
) -> Result<Var> {
    let (lv, uv) = (tape.value(lower), tape.value(upper));
    let shape = lv.shape().to_vec();
    if shape.len() != 2 || uv.shape() != shape.as_slice() || tape.shape(depth) != shape {
        return Err(MvsError::ShapeMismatch {
            op: "discretize",
            lhs: shape,
            rhs: uv.shape().to_vec(),
        });
    }
    if let Some((l, u)) = lv.data().iter().zip(uv.data()).find(|(l, u)| !(l < u)) {
        return Err(MvsError::invalid(format!("depth range lower {l} must be below upper {u}")));
    }
    if planes < 2 {
        return Err(MvsError::invalid(format!("need at least two planes, got {planes}")));
    }
    let mut plane_shape = vec![1];
    plane_shape.extend_from_slice(&shape);
    let lift = |v: Var| tape.reshape(v, &plane_shape);
    let steps = tape.constant(Tensor::from_fn(&[planes, 1, 1], |i| i as f64 / (planes - 1) as f64));
    match scheme {
        IntervalScheme::Ud => {
            let width = tape.sub(upper, lower)?;
            tape.add(lift(lower)?, tape.mul(lift(width)?, steps)?)
        }
        IntervalScheme::Sid => {
            if let Some(l) = lv.data().iter().find(|&&l| !(l > 0.0)) {
                return Err(MvsError::invalid(format!("log-uniform discretization needs positive lower bound, got {l}")));
            }
            let (ll, lu) = (tape.ln(lower), tape.ln(upper));
            let width = tape.sub(lu, ll)?;
            Ok(tape.exp(tape.add(lift(ll)?, tape.mul(lift(width)?, steps)?)?))
        }
        IntervalScheme::Clid => {
            let offsets = clid_offsets(planes)?;
            // half = min(D − lower, upper − D) = a − max(a − b, 0)
            let a = tape.sub(depth, lower)?;
            let b = tape.sub(upper, depth)?;
            let half = tape.sub(a, tape.max_const(tape.sub(a, b)?, 0.0))?;
            if let Some(h) = tape.value(half).data().iter().find(|&&h| !(h > 0.0)) {
                return Err(MvsError::invalid(format!("centre must lie strictly inside the range (half-width {h})")));
            }
            let coef = tape.constant(Tensor::new(vec![planes, 1, 1], offsets)?);
            tape.add(lift(depth)?, tape.mul(lift(half)?, coef)?)
        }
    }
}

/// Stage-one planes: uniform over the camera's sweep range, resampled to `planes`
/// and shared by every pixel.
pub fn initial_hypothesis(cam: &CameraModel, h: usize, w: usize, planes: usize) -> Result<DepthHypothesis> {
    cam.validate_depth()?;
    if planes < 2 {
        return Err(MvsError::invalid(format!("need at least two planes, got {planes}")));
    }
    let (lo, hi) = (cam.depth_min, cam.depth_max());
    let step = (hi - lo) / (planes - 1) as f64;
    let values: Vec<f64> = (0..planes)
        .map(|i| if i == planes - 1 { hi } else { lo + step * i as f64 })
        .collect();
    let t = Tensor::from_fn(&[planes, h, w], |i| values[i / (h * w)]);
    DepthHypothesis::new(t, 1)
}

// ---- untracked conveniences ----------------------------------------------

pub fn regress_depth_plain(hyp: &DepthHypothesis, prob: &ProbabilityVolume) -> Result<Tensor> {
    let tape = Tape::new();
    let d = regress_depth(&tape, tape.constant(hyp.planes.clone()), tape.constant(prob.probs.clone()))?;
    Ok((*tape.value(d)).clone())
}

pub fn estimate_plain(hyp: &DepthHypothesis, prob: &ProbabilityVolume) -> Result<DepthEstimate> {
    let tape = Tape::new();
    let (r, p) = (tape.constant(hyp.planes.clone()), tape.constant(prob.probs.clone()));
    let d = regress_depth(&tape, r, p)?;
    let s = hypothesis_variance(&tape, r, p, d)?;
    Ok(DepthEstimate {
        depth: (*tape.value(d)).clone(),
        sigma: (*tape.value(s)).clone(),
    })
}

pub fn deform_range_plain(depth: &Tensor, sigma: &Tensor, p: &RangeParams) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let (l, u) = deform_range(&tape, tape.constant(depth.clone()), tape.constant(sigma.clone()), p)?;
    Ok(((*tape.value(l)).clone(), (*tape.value(u)).clone()))
}

pub fn discretize_plain(
    lower: &Tensor,
    upper: &Tensor,
    depth: &Tensor,
    planes: usize,
    scheme: IntervalScheme,
    stage: usize,
) -> Result<DepthHypothesis> {
    let tape = Tape::new();
    let out = discretize(
        &tape,
        tape.constant(lower.clone()),
        tape.constant(upper.clone()),
        tape.constant(depth.clone()),
        planes,
        scheme,
    )?;
    DepthHypothesis::new((*tape.value(out)).clone(), stage)
}
