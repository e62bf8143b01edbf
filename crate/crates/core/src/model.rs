//! Feature pyramid and the three-stage cascade.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{scale_intrinsics, CameraModel};
use crate::config::ModelConfig;
use crate::cost_volume::{regularize, variance_cost, warp_to_volume, Regularizer};
use crate::error::{MvsError, Result};
use crate::hypothesis::{
    deform_range_tracked, discretize, hypothesis_variance, initial_hypothesis, regress_depth,
};
use crate::layers::{blur_subsample, conv2d_bias, kaiming_uniform};
use crate::sampling::{offset_bias, point_pattern, pss_aggregate, PssInput, PssOutput, PssSettings, PssWeights};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Resolution of each stage relative to the input image.
pub const STAGE_SCALES: [f64; 3] = [1.0 / 16.0, 0.25, 1.0];
/// Subsampling applied before each pyramid level, finest first.
const PYRAMID_STEP: usize = 4;

/// Reference image first, then the sources. Images are [3,H,W].
#[derive(Clone, Debug)]
pub struct ViewSet {
    pub images: Vec<Tensor>,
    pub cams: Vec<CameraModel>,
}

impl ViewSet {
    pub fn validate(&self) -> Result<(usize, usize)> {
        if self.images.len() < 2 || self.images.len() != self.cams.len() {
            return Err(MvsError::invalid(format!(
                "need at least 2 views with one camera each, got {} images and {} cameras",
                self.images.len(),
                self.cams.len()
            )));
        }
        let s = self.images[0].shape().to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(MvsError::invalid(format!("images must be [3,H,W], got {s:?}")));
        }
        if let Some(other) = self.images.iter().find(|im| im.shape() != s.as_slice()) {
            return Err(MvsError::ShapeMismatch {
                op: "view set",
                lhs: s,
                rhs: other.shape().to_vec(),
            });
        }
        let (h, w) = (s[1], s[2]);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(MvsError::invalid(format!("image size {h}x{w} is not divisible by 16")));
        }
        for cam in &self.cams {
            cam.validate()?;
        }
        self.cams[0].validate_depth()?;
        Ok((h, w))
    }
}

/// Named parameter arrays plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub arrays: BTreeMap<String, Tensor>,
}

fn stage_key(k: usize) -> usize {
    k + 1
}

impl ModelParams {
    /// Kaiming-uniform conv stacks with zero biases, stored on the f32 grid; the offset and view-logit
    /// heads start at zero weights so deformable sampling begins at its anchor pattern.
    pub fn init(config: &ModelConfig) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut arrays = BTreeMap::new();
        let mut conv = |name: String, o: usize, i: usize, arrays: &mut BTreeMap<String, Tensor>| {
            arrays.insert(format!("{name}.w"), kaiming_uniform(&[o, i, 3, 3], &mut rng));
            arrays.insert(format!("{name}.b"), Tensor::zeros(&[o, 1, 1]));
        };
        let [c1, c2, c3] = config.channels;
        conv("feat.s3.c0".into(), c3, 3, &mut arrays);
        conv("feat.s3.c1".into(), c3, c3, &mut arrays);
        conv("feat.s2.c0".into(), c2, c3, &mut arrays);
        conv("feat.s2.c1".into(), c2, c2, &mut arrays);
        conv("feat.s1.c0".into(), c1, c2, &mut arrays);
        conv("feat.s1.c1".into(), c1, c1, &mut arrays);

        let p = config.points;
        for k in 0..3 {
            let c = config.channels[k];
            let s = stage_key(k);
            arrays.insert(format!("pss.{s}.off3d.w"), Tensor::zeros(&[3, 2 * c, 3, 3]));
            arrays.insert(format!("pss.{s}.off3d.b"), Tensor::zeros(&[3, 1, 1]));
            arrays.insert(format!("pss.{s}.off2d.w"), Tensor::zeros(&[3 * p + 1, 2 * c, 3, 3]));
            let pattern = point_pattern(config.point_scheme, p, pattern_seed(config.seed, s))?;
            arrays.insert(format!("pss.{s}.off2d.b"), offset_bias(&pattern, config.clamp_px, p + 1)?);
            arrays.insert(format!("pss.{s}.ref.w"), Tensor::zeros(&[1, c, 3, 3]));
            arrays.insert(format!("pss.{s}.ref.b"), Tensor::zeros(&[1, 1, 1]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5245_4755);
        for k in 0..3 {
            let s = stage_key(k);
            let mut cin = config.channels[k];
            for j in 0..config.reg_layers {
                let cout = if j + 1 == config.reg_layers { 1 } else { config.reg_channels };
                let shape = [cout, cin, 3, 3, 3];
                arrays.insert(format!("reg.{s}.l{j}.w"), kaiming_uniform(&shape, &mut rng));
                arrays.insert(format!("reg.{s}.l{j}.b"), Tensor::zeros(&[cout, 1, 1, 1]));
                cin = cout;
            }
        }
        let arrays = arrays.into_iter().map(|(k, v)| (k, v.map(|x| x as f32 as f64))).collect();
        Ok(ModelParams {
            config: config.clone(),
            arrays,
        })
    }

    /// Records every array on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundParams {
        let vars = self
            .arrays
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn num_values(&self) -> usize {
        self.arrays.values().map(Tensor::numel).sum()
    }
}

fn pattern_seed(seed: u64, stage: usize) -> u64 {
    seed ^ (0x5053_5300 + stage as u64)
}

/// Parameter arrays recorded on a tape, by name.
pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| MvsError::invalid(format!("missing parameter '{name}'")))
    }

    fn pair(&self, name: &str) -> Result<(Var, Var)> {
        Ok((self.get(&format!("{name}.w"))?, self.get(&format!("{name}.b"))?))
    }
}

/// Per-image standardisation to zero mean and unit variance.
pub fn normalize_image(img: &Tensor) -> Tensor {
    let n = img.numel() as f64;
    let mean = img.sum() / n;
    let var = img.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-6);
    img.map(|v| (v - mean) / std)
}

/// Feature maps at 1/16, 1/4 and full resolution.
pub fn extract_features(tape: &Tape, image: &Tensor, params: &BoundParams) -> Result<[Var; 3]> {
    let s = image.shape();
    if s.len() != 3 || s[1] % 16 != 0 || s[2] % 16 != 0 {
        return Err(MvsError::invalid(format!("image must be [C,H,W] with H, W divisible by 16, got {s:?}")));
    }
    let x = tape.constant(normalize_image(image));
    let conv = |x: Var, name: &str| -> Result<Var> {
        let (w, b) = params.pair(name)?;
        conv2d_bias(tape, x, w, b, 1, 1)
    };
    let h3 = tape.relu(conv(x, "feat.s3.c0")?);
    let f3 = conv(h3, "feat.s3.c1")?;
    let h2 = blur_subsample(tape, tape.relu(conv(h3, "feat.s2.c0")?), PYRAMID_STEP)?;
    let f2 = conv(h2, "feat.s2.c1")?;
    let h1 = blur_subsample(tape, tape.relu(conv(h2, "feat.s1.c0")?), PYRAMID_STEP)?;
    let f1 = conv(h1, "feat.s1.c1")?;
    Ok([f1, f2, f3])
}

/// Tracked outputs of one cascade stage.
pub struct StageOutput {
    /// Hypothesis depths [d,H,W].
    pub planes: Var,
    /// Probability over planes [d,H,W].
    pub prob: Var,
    pub depth: Var,
    pub sigma: Var,
    pub pss: Option<PssOutput>,
}

/// Plain-valued copy of a stage's outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct StageResult {
    pub planes: Tensor,
    pub prob: Tensor,
    pub depth: Tensor,
    pub sigma: Tensor,
}

impl StageResult {
    pub fn from_output(tape: &Tape, out: &StageOutput) -> StageResult {
        StageResult {
            planes: (*tape.value(out.planes)).clone(),
            prob: (*tape.value(out.prob)).clone(),
            depth: (*tape.value(out.depth)).clone(),
            sigma: (*tape.value(out.sigma)).clone(),
        }
    }

    /// Probability mass of the most likely plane and its two neighbours.
    pub fn confidence(&self) -> Tensor {
        let s = self.prob.shape();
        let (d, hw) = (s[0], s[1] * s[2]);
        let p = self.prob.data();
        Tensor::from_fn(&[s[1], s[2]], |px| {
            let best = (0..d)
                .max_by(|&a, &b| p[a * hw + px].total_cmp(&p[b * hw + px]))
                .unwrap_or(0);
            let (lo, hi) = (best.saturating_sub(1), (best + 1).min(d - 1));
            (lo..=hi).map(|i| p[i * hw + px]).sum()
        })
    }
}

/// Bilinear upsampling of [h',w'] to [h,w]: fine pixel `x` reads coarse
/// position `x · h'/h`, clamped to the last coarse pixel.
pub fn upsample_bilinear(tape: &Tape, map: Var, h: usize, w: usize) -> Result<Var> {
    upsample(tape, map, h, w, false)
}

/// Nearest-neighbour upsampling with the same coordinate mapping.
pub fn upsample_nearest(tape: &Tape, map: Var, h: usize, w: usize) -> Result<Var> {
    upsample(tape, map, h, w, true)
}

fn upsample(tape: &Tape, map: Var, h: usize, w: usize, nearest: bool) -> Result<Var> {
    let s = tape.shape(map);
    if s.len() != 2 {
        return Err(MvsError::invalid(format!("upsample expects [H,W], got {s:?}")));
    }
    let (hs, ws) = (s[0], s[1]);
    let (ry, rx) = (hs as f64 / h as f64, ws as f64 / w as f64);
    let coord = |i: usize, r: f64, n: usize| {
        let c = (i as f64 * r).min((n - 1) as f64);
        if nearest {
            (c + 0.5).floor().min((n - 1) as f64)
        } else {
            c
        }
    };
    let coords = Tensor::from_fn(&[h, w, 2], |i| {
        let (p, comp) = (i / 2, i % 2);
        if comp == 0 {
            coord(p % w, rx, ws)
        } else {
            coord(p / w, ry, hs)
        }
    });
    let src = tape.reshape(map, &[1, hs, ws])?;
    let out = tape.gather_bilinear(src, tape.constant(coords), None)?;
    tape.reshape(out, &[h, w])
}

/// Mean plane spacing per pixel, [H,W].
fn plane_spacing(tape: &Tape, planes: Var) -> Result<Var> {
    let s = tape.shape(planes);
    let d = s[0];
    let span = tape.sub(tape.slice(planes, 0, d - 1, d)?, tape.slice(planes, 0, 0, 1)?)?;
    tape.reshape(tape.mul_scalar(span, 1.0 / (d - 1) as f64), &s[1..])
}

/// Runs the cascade. Stage outputs are ordered coarse to fine.
pub fn forward(tape: &Tape, params: &BoundParams, config: &ModelConfig, views: &ViewSet) -> Result<Vec<StageOutput>> {
    let (h_img, w_img) = views.validate()?;
    let features: Vec<[Var; 3]> = views
        .images
        .iter()
        .map(|im| extract_features(tape, im, params))
        .collect::<Result<_>>()?;

    let base_interval = (views.cams[0].depth_max() - views.cams[0].depth_min) / (config.planes[0] - 1) as f64;
    let mut outputs: Vec<StageOutput> = Vec::with_capacity(3);
    for k in 0..3 {
        let scale = STAGE_SCALES[k];
        let cams: Vec<CameraModel> = views
            .cams
            .iter()
            .map(|c| scale_intrinsics(c, scale))
            .collect::<Result<_>>()?;
        let ref_feat = features[0][k];
        let fs = tape.shape(ref_feat);
        let (h, w) = (fs[1], fs[2]);
        debug_assert_eq!((h, w), ((h_img as f64 * scale) as usize, (w_img as f64 * scale) as usize));
        let d = config.planes[k];

        let (planes, anchor) = match outputs.last() {
            None => {
                let hyp = initial_hypothesis(&views.cams[0], h, w, d)?;
                let planes = tape.constant(hyp.planes);
                let mid = tape.reshape(tape.slice(planes, 0, d / 2, d / 2 + 1)?, &[h, w])?;
                (planes, mid)
            }
            Some(prev) => {
                let depth = upsample_bilinear(tape, prev.depth, h, w)?;
                let sigma = upsample_nearest(tape, prev.sigma, h, w)?;
                let (lower, upper) = if config.dhd_range {
                    let spacing = tape.mean_all(plane_spacing(tape, prev.planes)?);
                    let sigma_min = tape.mul_scalar(spacing, config.sigma_min_factor);
                    deform_range_tracked(tape, depth, sigma, sigma_min, config.eta, config.depth_floor)?
                } else {
                    let half = 0.5 * (d - 1) as f64 * base_interval * config.interval_ratios[k];
                    let lower = tape.max_const(tape.add_scalar(depth, -half), config.depth_floor);
                    (lower, tape.add_scalar(depth, half))
                };
                (discretize(tape, lower, upper, depth, d, config.dhd_interval)?, depth)
            }
        };

        let src_feats: Vec<Var> = features[1..].iter().map(|f| f[k]).collect();
        let s = stage_key(k);
        let pss = if config.pss {
            let clamp_z = tape.mul_scalar(plane_spacing(tape, planes)?, config.clamp_z_factor);
            let input = PssInput {
                ref_feat,
                src_feats: &src_feats,
                ref_cam: &cams[0],
                src_cams: &cams[1..],
                anchor_depth: anchor,
                clamp_z,
            };
            let weights = PssWeights {
                off3d: params.pair(&format!("pss.{s}.off3d"))?,
                off2d: params.pair(&format!("pss.{s}.off2d"))?,
                refview: params.pair(&format!("pss.{s}.ref"))?,
            };
            let settings = PssSettings {
                points: config.points,
                clamp_px: config.clamp_px,
                use_3d: config.pss_3d,
                use_2d: config.pss_2d,
            };
            Some(pss_aggregate(tape, &input, &weights, &settings)?)
        } else {
            None
        };
        let ref_hat = pss.as_ref().map_or(ref_feat, |p| p.feature);

        let volumes = src_feats
            .iter()
            .zip(&cams[1..])
            .map(|(&f, cam)| warp_to_volume(tape, f, &cams[0], cam, planes))
            .collect::<Result<Vec<_>>>()?;
        let cost = variance_cost(tape, ref_hat, &volumes, config.empty_cost)?;
        let reg = if config.reg_bypass {
            Regularizer::Bypass {
                gain: config.bypass_gain,
            }
        } else {
            Regularizer::Learned(
                (0..config.reg_layers)
                    .map(|j| params.pair(&format!("reg.{s}.l{j}")))
                    .collect::<Result<_>>()?,
            )
        };
        let prob = regularize(tape, cost, &reg)?;
        let depth = regress_depth(tape, planes, prob)?;
        let sigma = hypothesis_variance(tape, planes, prob, depth)?;
        outputs.push(StageOutput {
            planes,
            prob,
            depth,
            sigma,
            pss,
        });
    }
    Ok(outputs)
}

/// Untracked forward pass.
pub fn predict(params: &ModelParams, views: &ViewSet) -> Result<Vec<StageResult>> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let outs = forward(&tape, &bound, &params.config, views)?;
    Ok(outs.iter().map(|o| StageResult::from_output(&tape, o)).collect())
}
