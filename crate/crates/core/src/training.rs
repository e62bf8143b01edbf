//! Multi-stage L1 loss, Adam and the training loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, TrainConfig};
use crate::error::{MvsError, Result};
use crate::metrics::{evaluate, mean_report, EvalReport};
use crate::model::{forward, predict, ModelParams, StageOutput, STAGE_SCALES};
use crate::synth::SceneBundle;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rounds to the nearest f32 so stored state round-trips exactly.
pub fn to_f32_grid(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Ground truth subsampled to each stage's resolution (pixel `i` of a stage
/// at scale `1/s` reads pixel `s·i`), with validity masks.
pub fn gt_pyramid(gt: &Tensor) -> Result<([Tensor; 3], [Tensor; 3])> {
    let s = gt.shape();
    if s.len() != 2 {
        return Err(MvsError::invalid(format!("ground truth must be [H,W], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let level = |scale: f64| -> (Tensor, Tensor) {
        let step = (1.0 / scale).round() as usize;
        let (hh, ww) = (h / step, w / step);
        let d = Tensor::from_fn(&[hh, ww], |i| gt.data()[(i / ww) * step * w + (i % ww) * step]);
        let m = d.map(|v| if v.is_finite() && v > 0.0 { 1.0 } else { 0.0 });
        (d, m)
    };
    let [a, b, c] = STAGE_SCALES.map(level);
    Ok(([a.0, b.0, c.0], [a.1, b.1, c.1]))
}

/// `Σ_k λ_k · mean_{valid} |D_k − G_k|`.
pub fn multistage_l1_loss(tape: &Tape, depths: &[Var], gts: &[Tensor], masks: &[Tensor], weights: &[f64]) -> Result<Var> {
    if depths.len() != gts.len() || gts.len() != masks.len() || masks.len() != weights.len() {
        return Err(MvsError::invalid("loss needs one ground truth, mask and weight per stage"));
    }
    let mut total: Option<Var> = None;
    for (k, &d) in depths.iter().enumerate() {
        let count = masks[k].sum();
        if count == 0.0 {
            return Err(MvsError::invalid(format!("stage {} has no valid ground-truth pixels", k + 1)));
        }
        let gt = gts[k].zip_with(&masks[k], |g, m| if m > 0.0 { g } else { 0.0 })?;
        let diff = tape.sub(d, tape.constant(gt))?;
        let masked = tape.mul(tape.abs(diff), tape.constant(masks[k].clone()))?;
        let term = tape.mul_scalar(tape.sum_all(masked), weights[k] / count);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| MvsError::invalid("loss needs at least one stage"))
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched. Parameters and moments are kept on the f32 grid.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| MvsError::invalid(format!("gradient for unknown parameter '{name}'")))?;
        if p.shape() != g.shape() {
            return Err(MvsError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        if m.shape() != g.shape() || v.shape() != g.shape() {
            return Err(MvsError::ShapeMismatch {
                op: "adam_step moments",
                lhs: m.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let new_m = to_f32_grid(&m.zip_with(g, |m, g| cfg.beta1 * m + (1.0 - cfg.beta1) * g)?);
        let new_v = to_f32_grid(&v.zip_with(g, |v, g| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g)?);
        let step = new_m.zip_with(&new_v, |m, v| cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps))?;
        *p = to_f32_grid(&p.zip_with(&step, |p, s| p - s)?);
        *m = new_m;
        *v = new_v;
    }
    Ok(())
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> TrainState {
        TrainState {
            params,
            adam: AdamState::default(),
            epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub eval: EvalReport,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} loss={} mae={} acc06={} acc3i={}",
            self.epoch, self.loss, self.eval.mae, self.eval.acc_06m, self.eval.acc_3interval
        )
    }
}

/// Deterministic split: the last `floor(n · holdout)` scenes are held out,
/// keeping at least one training scene.
pub fn split_indices(n: usize, holdout: f64) -> (Vec<usize>, Vec<usize>) {
    let held = ((n as f64 * holdout).floor() as usize).min(n.saturating_sub(1));
    ((0..n - held).collect(), (n - held..n).collect())
}

/// Scene visiting order for one epoch.
pub fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Loss and gradients of one scene with the nadir view as reference.
pub fn scene_gradients(
    params: &ModelParams,
    scene: &SceneBundle,
    weights: &[f64; 3],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let outs = forward(&tape, &bound, &params.config, &scene.view_set(0))?;
    let loss = scene_loss(&tape, &outs, &scene.depths[0], weights)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let mut named = BTreeMap::new();
    for (name, var) in &bound.vars {
        if let Some(g) = grads.take(*var) {
            named.insert(name.clone(), g);
        }
    }
    Ok((value, named))
}

pub fn scene_loss(tape: &Tape, outs: &[StageOutput], gt: &Tensor, weights: &[f64; 3]) -> Result<Var> {
    let (gts, masks) = gt_pyramid(gt)?;
    let depths: Vec<Var> = outs.iter().map(|o| o.depth).collect();
    multistage_l1_loss(tape, &depths, &gts, &masks, weights)
}

/// Untracked loss of one scene.
pub fn eval_loss(params: &ModelParams, scene: &SceneBundle, weights: &[f64; 3]) -> Result<f64> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let outs = forward(&tape, &bound, &params.config, &scene.view_set(0))?;
    Ok(tape.value(scene_loss(&tape, &outs, &scene.depths[0], weights)?).item())
}

/// Stage-3 metrics of the nadir view of each scene, averaged.
pub fn evaluate_scenes(params: &ModelParams, scenes: &[&SceneBundle]) -> Result<EvalReport> {
    let reports = scenes
        .iter()
        .map(|s| {
            let out = predict(params, &s.view_set(0))?;
            let gt = &s.depths[0];
            let valid = gt.map(|v| if v.is_finite() && v > 0.0 { 1.0 } else { 0.0 });
            evaluate(&out[2].depth, gt, &valid, s.cams[0].depth_interval)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_report(&reports)
}

fn check_finite(loss: f64, grads: &BTreeMap<String, Tensor>, epoch: usize, step: u64) -> Result<()> {
    if !loss.is_finite() {
        return Err(MvsError::Numeric(format!("loss is {loss} at epoch {epoch}, step {step}")));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(MvsError::Numeric(format!(
            "non-finite gradient for '{name}' at epoch {epoch}, step {step}"
        )));
    }
    Ok(())
}

/// Runs epochs `state.epoch + 1 ..= cfg.train.epochs`, writing one metrics line
/// per epoch to `log`. Held-out scenes are evaluated after every epoch (the
/// training scenes when nothing is held out).
pub fn train(
    scenes: &[SceneBundle],
    cfg: &Config,
    state: &mut TrainState,
    log: &mut dyn Write,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(MvsError::invalid("training needs at least one scene"));
    }
    let (train_idx, held_idx) = split_indices(scenes.len(), cfg.train.holdout);
    let eval_idx = if held_idx.is_empty() { &train_idx } else { &held_idx };
    let eval_set: Vec<&SceneBundle> = eval_idx.iter().map(|&i| &scenes[i]).collect();
    let mut logs = Vec::new();
    while state.epoch < cfg.train.epochs {
        let epoch = state.epoch + 1;
        let mut total = 0.0;
        let order = epoch_order(&train_idx, cfg.model.seed, epoch);
        for &i in &order {
            let (loss, grads) = scene_gradients(&state.params, &scenes[i], &cfg.train.stage_weights)?;
            check_finite(loss, &grads, epoch, state.adam.step + 1)?;
            adam_step(&mut state.params.arrays, &grads, &mut state.adam, &cfg.train)?;
            total += loss;
        }
        state.epoch = epoch;
        let entry = EpochLog {
            epoch,
            loss: total / order.len() as f64,
            eval: evaluate_scenes(&state.params, &eval_set)?,
        };
        writeln!(log, "{}", entry.line()).map_err(|e| MvsError::io("<metrics log>", e))?;
        logs.push(entry);
    }
    Ok(logs)
}
