//! One check per acceptance criterion. Each returns whether it held plus a
//! one-line summary of what was measured.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deform_mvs::camera::{homography_matrix, look_at, CameraModel};
use deform_mvs::checkpoint::{load_checkpoint, save_checkpoint};
use deform_mvs::config::{Config, ModelConfig};
use deform_mvs::cost_volume::{regularize, variance_cost, warp_to_volume, Regularizer};
use deform_mvs::formats::{read_pfm, write_pfm};
use deform_mvs::fusion::{backproject, read_ply, write_ply};
use deform_mvs::hypothesis::{clid_offsets, discretize_plain, initial_hypothesis, IntervalScheme};
use deform_mvs::metrics::evaluate;
use deform_mvs::model::{predict, ModelParams};
use deform_mvs::synth::{make_suite, Preset, SceneBundle, SceneSpec};
use deform_mvs::training::{adam_step, eval_loss, evaluate_scenes, scene_gradients, split_indices, train, TrainState};
use deform_mvs::{Tape, Tensor, Var};

use super::baseline;
use super::suite::{pipeline_report, primitive_reports, stage_report, COMPOSITE_TOL, PRIMITIVE_TOL};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Outcome {
        Outcome { pass, detail }
    }
}

pub fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut worst_prim = 0.0f64;
    let mut failed = Vec::new();
    for (name, r) in primitive_reports() {
        worst_prim = worst_prim.max(r.max_rel_error);
        if r.checked == 0 || r.max_rel_error >= PRIMITIVE_TOL {
            failed.push(name);
        }
    }
    let stage = stage_report();
    let cascade = pipeline_report(7);
    let secs = t0.elapsed().as_secs_f64();
    let pass = failed.is_empty()
        && stage.max_rel_error < COMPOSITE_TOL
        && cascade.max_rel_error < COMPOSITE_TOL
        && secs < 120.0;
    Outcome::new(
        pass,
        format!(
            "primitives max rel {worst_prim:.2e} (failed: {failed:?}), stage {:.2e} over {}, cascade {:.2e} over {}, {secs:.1}s",
            stage.max_rel_error, stage.checked, cascade.max_rel_error, cascade.checked
        ),
    )
}

fn cam_at(eye: Vector3<f64>, target: Vector3<f64>, f: f64) -> CameraModel {
    let k = Matrix3::new(f, 0.0, 39.5, 0.0, f, 31.5, 0.0, 0.0, 1.0);
    let t = look_at(eye, target, Vector3::new(0.0, -1.0, 0.0)).unwrap();
    CameraModel::new(k, t, 5.0, 0.25, 48).unwrap()
}

/// Max |H_rs · H_sr − I| over several camera pairs.
pub fn homography_inverse_error() -> f64 {
    let cams = [
        cam_at(Vector3::new(0.0, 0.0, 20.0), Vector3::zeros(), 80.0),
        cam_at(Vector3::new(16.0, 0.0, 20.0), Vector3::zeros(), 80.0),
        cam_at(Vector3::new(-3.0, 7.0, 15.0), Vector3::new(1.0, -2.0, 0.5), 120.0),
    ];
    let mut worst = 0.0f64;
    for a in &cams {
        for b in &cams {
            let prod = homography_matrix(a, b).unwrap() * homography_matrix(b, a).unwrap();
            worst = worst.max((prod - Matrix4::identity()).abs().max());
        }
    }
    worst
}

/// Horizontal disparity of a point at depth 25 seen by two fronto-parallel
/// cameras with f = 100 and a 0.5 baseline.
pub fn stereo_disparity() -> f64 {
    let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 40.0, 0.0, 0.0, 1.0);
    let mut right = Matrix4::identity();
    right[(0, 3)] = -0.5;
    let l = CameraModel::new(k, Matrix4::identity(), 1.0, 1.0, 2).unwrap();
    let r = CameraModel::new(k, right, 1.0, 1.0, 2).unwrap();
    let p = Vector3::new(1.3, -0.7, 25.0);
    l.project(&p).0 - r.project(&p).0
}

/// Max pixel / depth error of project(lift(x, y, z)) over random samples.
pub fn lift_project_error(samples: usize, seed: u64) -> f64 {
    let cam = cam_at(Vector3::new(-3.0, 7.0, 15.0), Vector3::new(1.0, -2.0, 0.5), 120.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (x, y, z) = (rng.gen_range(-10.0..90.0), rng.gen_range(-10.0..74.0), rng.gen_range(1.0..60.0));
        let (u, v, d) = cam.project(&cam.lift(x, y, z));
        worst = worst.max((u - x).abs()).max((v - y).abs()).max((d - z).abs());
    }
    worst
}

pub fn geometry() -> Outcome {
    let hom = homography_inverse_error();
    let disp = stereo_disparity();
    let lp = lift_project_error(1000, 11);
    let pass = hom < 1e-8 && (disp - 2.0).abs() < 1e-6 && lp < 1e-6;
    Outcome::new(pass, format!("homography pair {hom:.2e}, disparity {disp:.9} px, lift/project {lp:.2e}"))
}

fn one(v: f64) -> Tensor {
    Tensor::full(&[1, 1], v)
}

/// Centred planes for one pixel with range `d ± ησ`.
pub fn clid_planes(depth: f64, sigma: f64, eta: f64, planes: usize) -> Vec<f64> {
    let half = eta * sigma;
    let h = discretize_plain(&one(depth - half), &one(depth + half), &one(depth), planes, IntervalScheme::Clid, 2).unwrap();
    h.planes.data().to_vec()
}

pub fn clid() -> Outcome {
    let expected = [0.1, 0.3, 0.6, 1.0];
    let offsets = clid_offsets(8).unwrap();
    let mut exact = offsets.len() == 8;
    // i(i+1) / (h(h+1)) evaluated directly
    for (i, &e) in expected.iter().enumerate() {
        let direct = ((i + 1) * (i + 2)) as f64 / 20.0;
        exact &= (offsets[4 + i] - e).abs() < 1e-12 && (direct - e).abs() < 1e-12 && (offsets[3 - i] + e).abs() < 1e-12;
    }
    let p = clid_planes(5.0, 1.0, 1.0, 8);
    for (i, &e) in expected.iter().enumerate() {
        exact &= (p[4 + i] - 5.0 - e).abs() < 1e-12;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut bad_end, mut bad_mono, mut bad_sym) = (0, 0, 0);
    for _ in 0..1000 {
        let sigma = rng.gen_range(0.01..5.0);
        let eta = rng.gen_range(0.5..4.0);
        // planes must stay in front of the camera
        let depth = eta * sigma + rng.gen_range(0.1..200.0);
        let d = 2 * rng.gen_range(1..=16);
        let p = clid_planes(depth, sigma, eta, d);
        let half = eta * sigma;
        let tol = 1e-12 * (depth + half);
        if (p[0] - (depth - half)).abs() > tol || (p[d - 1] - (depth + half)).abs() > tol {
            bad_end += 1;
        }
        if p.windows(2).any(|w| !(w[1] > w[0])) {
            bad_mono += 1;
        }
        if (0..d).any(|i| ((p[i] - depth) + (p[d - 1 - i] - depth)).abs() > tol) {
            bad_sym += 1;
        }
    }
    let pass = exact && bad_end == 0 && bad_mono == 0 && bad_sym == 0;
    Outcome::new(
        pass,
        format!(
            "offsets {:?} exact={exact}; over 1000 draws: endpoint {bad_end}, monotonic {bad_mono}, symmetric {bad_sym} violations",
            &offsets[4..]
        ),
    )
}

/// Largest per-pixel stage-depth gap between the model with every deformable
/// part off and the plain-array cascade, over `n` scenes.
pub fn baseline_gap(n: usize) -> f64 {
    let specs = make_suite(n, Preset::Clean, 404, 3).unwrap();
    let mut worst = 0.0f64;
    for (i, spec) in specs.iter().enumerate() {
        let bundle = spec.render().unwrap();
        let cfg = ModelConfig {
            seed: i as u64,
            ..ModelConfig::baseline()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let views = bundle.view_set(0);
        let model = predict(&params, &views).unwrap();
        let plain = baseline::cascade(&views.images, &views.cams, &params.arrays, &cfg);
        for (m, p) in model.iter().zip(&plain) {
            assert_eq!(m.depth.numel(), p.len());
            for (a, b) in m.depth.data().iter().zip(p) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

pub fn baseline_equivalence() -> Outcome {
    let gap = baseline_gap(10);
    Outcome::new(gap < 1e-6, format!("max |model - plain cascade| over 10 scenes, all stages: {gap:.2e}"))
}

pub struct SweepStats {
    pub visible: usize,
    pub exact: f64,
    pub within_one: f64,
    pub secs: f64,
}

/// Full-resolution RGB plane sweep over the reference camera's planes with the
/// parameter-free regularizer, scored on mutually visible reference pixels.
pub fn photometric_sweep(spec: &SceneSpec) -> SweepStats {
    let t0 = Instant::now();
    let b = spec.render().unwrap();
    let vis = spec.mutual_visibility().unwrap();
    let (h, w) = (spec.height, spec.width);
    let d = b.cams[0].num_planes;
    let tape = Tape::new();
    let imgs: Vec<Var> = b.images.iter().map(|im| tape.constant(im.to_tensor())).collect();
    let hyp = initial_hypothesis(&b.cams[0], h, w, d).unwrap();
    let planes = tape.constant(hyp.planes.clone());
    let vols: Vec<_> = (1..b.n_views())
        .map(|i| warp_to_volume(&tape, imgs[i], &b.cams[0], &b.cams[i], planes).unwrap())
        .collect();
    let cost = variance_cost(&tape, imgs[0], &vols, 10.0).unwrap();
    let prob = tape.value(regularize(&tape, cost, &Regularizer::Bypass { gain: 1.0 }).unwrap());
    let hw = h * w;
    let (pl, pr, gt) = (hyp.planes.data(), prob.data(), b.depths[0].data());
    let (mut n, mut exact, mut near) = (0usize, 0usize, 0usize);
    for p in 0..hw {
        if vis.data()[p] < 0.5 {
            continue;
        }
        n += 1;
        let best = (0..d).max_by(|&a, &c| pr[a * hw + p].total_cmp(&pr[c * hw + p])).unwrap();
        let nearest = (0..d)
            .min_by(|&a, &c| (pl[a * hw + p] - gt[p]).abs().total_cmp(&(pl[c * hw + p] - gt[p]).abs()))
            .unwrap();
        exact += usize::from(best == nearest);
        near += usize::from((pl[best * hw + p] - gt[p]).abs() <= b.cams[0].depth_interval);
    }
    SweepStats {
        visible: n,
        exact: exact as f64 / n as f64,
        within_one: near as f64 / n as f64,
        secs: t0.elapsed().as_secs_f64(),
    }
}

pub fn photometric_oracle() -> Outcome {
    let stats: Vec<SweepStats> = (0..4u64)
        .map(|seed| photometric_sweep(&SceneSpec::generate(seed, Preset::Clean, 3).unwrap()))
        .collect();
    let min_within = stats.iter().map(|s| s.within_one).fold(1.0, f64::min);
    let min_exact = stats.iter().map(|s| s.exact).fold(1.0, f64::min);
    let max_secs = stats.iter().map(|s| s.secs).fold(0.0, f64::max);
    let pass = min_within >= 0.95 && max_secs < 60.0;
    Outcome::new(
        pass,
        format!(
            "4 clean scenes: within 1 interval min {:.4} (need >= 0.95); exact nearest plane min {:.4}; visible px {:?}; slowest {max_secs:.2}s",
            min_within,
            min_exact,
            stats.iter().map(|s| s.visible).collect::<Vec<_>>()
        ),
    )
}

/// Results of one training run on the shared toy suite.
pub struct RunSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub heldout_mae: f64,
    pub stage3_interval: f64,
    pub steps: u64,
    pub secs: f64,
}

pub const TOY_SCENES: usize = 24;
pub const TOY_SEED: u64 = 2026;
pub const TOY_EPOCHS: usize = 10;

pub fn toy_suite() -> Vec<SceneBundle> {
    make_suite(TOY_SCENES, Preset::Both, TOY_SEED, 3)
        .unwrap()
        .iter()
        .map(|s| s.render().unwrap())
        .collect()
}

fn mean_loss(params: &ModelParams, scenes: &[&SceneBundle], weights: &[f64; 3]) -> f64 {
    scenes.iter().map(|s| eval_loss(params, s, weights).unwrap()).sum::<f64>() / scenes.len() as f64
}

/// Trains `model` from its seeded init for the fixed schedule.
pub fn toy_run(scenes: &[SceneBundle], model: ModelConfig) -> RunSummary {
    let t0 = Instant::now();
    let mut cfg = Config {
        model,
        ..Config::default()
    };
    cfg.train.epochs = TOY_EPOCHS;
    let (train_idx, held_idx) = split_indices(scenes.len(), cfg.train.holdout);
    let train_set: Vec<&SceneBundle> = train_idx.iter().map(|&i| &scenes[i]).collect();
    let held_set: Vec<&SceneBundle> = held_idx.iter().map(|&i| &scenes[i]).collect();
    let mut state = TrainState::new(ModelParams::init(&cfg.model).unwrap());
    let w = cfg.train.stage_weights;
    let initial_loss = mean_loss(&state.params, &train_set, &w);
    train(scenes, &cfg, &mut state, &mut std::io::sink()).unwrap();
    let final_loss = mean_loss(&state.params, &train_set, &w);
    let heldout_mae = evaluate_scenes(&state.params, &held_set).unwrap().mae;
    let c = &scenes[0].cams[0];
    let base = (c.depth_max() - c.depth_min) / (cfg.model.planes[0] - 1) as f64;
    RunSummary {
        initial_loss,
        final_loss,
        heldout_mae,
        stage3_interval: base * cfg.model.interval_ratios[2],
        steps: state.adam.step,
        secs: t0.elapsed().as_secs_f64(),
    }
}

/// Held-out MAE bound in stage-3 plane spacings.
pub const MAE_BOUND_INTERVALS: f64 = 2.0;

pub fn convergence(run: &RunSummary) -> Outcome {
    let bound = MAE_BOUND_INTERVALS * run.stage3_interval;
    let pass = run.steps == 200 && run.final_loss < 0.5 * run.initial_loss && run.heldout_mae < bound && run.secs < 1800.0;
    Outcome::new(
        pass,
        format!(
            "{} steps: train loss {:.4} -> {:.4} (ratio {:.3}, need < 0.5); held-out MAE {:.4} (need < {bound:.4}); {:.0}s",
            run.steps,
            run.initial_loss,
            run.final_loss,
            run.final_loss / run.initial_loss,
            run.heldout_mae,
            run.secs
        ),
    )
}

pub fn ablation_direction(full: &RunSummary, base: &RunSummary) -> Outcome {
    Outcome::new(
        full.heldout_mae <= base.heldout_mae,
        format!("held-out MAE baseline {:.4} vs full {:.4}", base.heldout_mae, full.heldout_mae),
    )
}

pub fn metrics_conformance() -> Outcome {
    let gt = Tensor::full(&[2, 2], 8.0);
    let pred = Tensor::new(vec![2, 2], vec![8.0, 8.125, 7.875, 8.75]).unwrap();
    let all = Tensor::ones(&[2, 2]);
    let r = evaluate(&pred, &gt, &all, 0.25).unwrap();
    let example = r.mae == 0.25 && r.acc_06m == 0.75 && r.acc_3interval == 0.75;
    // 100 intervals of 0.125 = 12.5: errors 2 and 12.4 count, 12.5 and 20 do not
    let gt = Tensor::full(&[1, 4], 50.0);
    let pred = Tensor::new(vec![1, 4], vec![52.0, 62.5, 30.0, 37.6]).unwrap();
    let o = evaluate(&pred, &gt, &Tensor::ones(&[1, 4]), 0.125).unwrap();
    let outlier = o.mae == (2.0 + (50.0 - 37.6)) / 2.0 && o.n_valid == 4 && o.acc_06m == 0.0;
    Outcome::new(
        example && outlier,
        format!(
            "example mae {} acc06 {} acc3i {}; outlier rule mae {} over {} valid",
            r.mae, r.acc_06m, r.acc_3interval, o.mae, o.n_valid
        ),
    )
}

pub fn io_round_trips(dir: &Path) -> Outcome {
    let bundle = SceneSpec::generate(21, Preset::Both, 3).unwrap().render().unwrap();
    let scene_dir = dir.join("scene");
    bundle.write(&scene_dir).unwrap();
    let bundle_ok = SceneBundle::read(&scene_dir).unwrap() == bundle;

    let pfm = dir.join("depth.pfm");
    write_pfm(&pfm, &bundle.depths[1]).unwrap();
    let pfm_ok = read_pfm(&pfm).unwrap() == bundle.depths[1];

    let cfg = Config {
        model: ModelConfig {
            channels: [8, 4, 4],
            planes: [8, 6, 4],
            reg_channels: 2,
            ..ModelConfig::default()
        },
        ..Config::default()
    };
    let mut state = TrainState::new(ModelParams::init(&cfg.model).unwrap());
    let (_, grads) = scene_gradients(&state.params, &bundle, &cfg.train.stage_weights).unwrap();
    adam_step(&mut state.params.arrays, &grads, &mut state.adam, &cfg.train).unwrap();
    state.epoch = 1;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &cfg, &state).unwrap();
    let (cfg2, state2) = load_checkpoint(&ckpt).unwrap();
    let ckpt_ok = cfg2 == cfg && state2 == state;

    let cloud = backproject(&bundle.depths[0], &bundle.cams[0], &bundle.images[0]).unwrap();
    let ply = dir.join("cloud.ply");
    write_ply(&cloud, &ply).unwrap();
    let ply_ok = read_ply(&ply).unwrap() == cloud && !cloud.is_empty();

    Outcome::new(
        bundle_ok && pfm_ok && ckpt_ok && ply_ok,
        format!("bundle {bundle_ok}, pfm {pfm_ok}, checkpoint {ckpt_ok}, ply {ply_ok} ({} points)", cloud.len()),
    )
}

fn cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_deform-mvs"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Byte contents of every file under `dir`, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn determinism(dir: &Path) -> Outcome {
    let data = dir.join("data");
    cli(dir, &["gen-scenes", "--out", data.to_str().unwrap(), "--n", "2", "--preset", "both", "--seed", "9"]);
    let mut runs = Vec::new();
    for r in 0..2 {
        let ckpt = dir.join(format!("run{r}.ckpt"));
        let pred = dir.join(format!("pred{r}"));
        cli(dir, &["train", "--data", data.to_str().unwrap(), "--out", ckpt.to_str().unwrap(), "--epochs", "2"]);
        cli(dir, &["predict", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", pred.to_str().unwrap()]);
        runs.push((std::fs::read(&ckpt).unwrap(), snapshot(&pred)));
    }
    let depth_files = runs[0].1.iter().filter(|(n, _)| n.contains("depth_")).count();
    let same_pred = runs[0].1 == runs[1].1;
    let same_ckpt = runs[0].0 == runs[1].0;
    Outcome::new(
        same_pred && same_ckpt && depth_files == 6,
        format!("{depth_files} depth maps byte-identical: {same_pred}; checkpoints identical: {same_ckpt}"),
    )
}
