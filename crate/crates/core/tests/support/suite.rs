//! Finite-difference checks over every primitive and over composed stages,
//! on 8x8 to 16x16 inputs. Shared by the gradient tests and acceptance.

use deform_mvs::camera::{look_at, CameraModel};
use deform_mvs::config::ModelConfig;
use deform_mvs::cost_volume::{regularize, variance_cost, warp_to_volume, Regularizer};
use deform_mvs::hypothesis::{deform_range_tracked, discretize, hypothesis_variance, regress_depth, IntervalScheme};
use deform_mvs::model::{forward, ModelParams, ViewSet};
use deform_mvs::sampling::{offset_bias, point_pattern, pss_aggregate, PointScheme, PssInput, PssSettings, PssWeights};
use deform_mvs::training::scene_loss;
use deform_mvs::{Tape, Tensor, Var};
use nalgebra::{Matrix3, Vector3};

use super::gradcheck::{check, check_strided, random_tensor, GradReport};

pub const H: f64 = 1e-5;
/// Smaller step for the full cascade, where ReLU and bilinear cell kinks sit close to the probe point.
pub const CASCADE_H: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

fn weighted(t: &Tape, y: Var, seed: u64) -> Var {
    let shape = t.shape(y);
    let w = t.constant(random_tensor(&shape, seed));
    t.sum_all(t.mul(y, w).unwrap())
}

/// Coordinates strictly inside bilinear cells, away from cell edges.
fn cell_interior(shape: &[usize], seed: u64, w: usize, h: usize) -> Tensor {
    let raw = random_tensor(shape, seed);
    Tensor::from_fn(shape, |i| {
        let u = raw.data()[i] * 0.5 + 0.5;
        let n = if i % 2 == 0 { w } else { h };
        let cell = ((i / 2) * 7 % (n - 1)) as f64;
        cell + 0.1 + 0.8 * u
    })
}

/// One report per primitive.
pub fn primitive_reports() -> Vec<(&'static str, GradReport)> {
    let a = random_tensor(&[2, 8, 8], 1);
    let b = random_tensor(&[8, 1], 2);
    let pos = a.map(|v| v.abs() + 0.2);
    let off_kink = a.map(|v| if (v - 0.1).abs() < 0.01 { v + 0.05 } else { v });
    let off_zero = a.map(|v| if v.abs() < 0.01 { v + 0.05 } else { v });
    let x3 = random_tensor(&[2, 3, 8, 8], 9);
    let mask = Tensor::from_fn(&[3, 8, 8], |i| if i % 7 == 3 { 0.0 } else { 1.0 });
    let feat = random_tensor(&[2, 8, 8], 13);
    let coords = cell_interior(&[4, 8, 2], 14, 8, 8);

    let mut out: Vec<(&'static str, GradReport)> = Vec::new();
    let mut run = |name: &'static str, inputs: &[Tensor], f: &dyn Fn(&Tape, &[Var]) -> Var| {
        out.push((name, check(inputs, H, 1e-8, f)));
    };
    run("add", &[a.clone(), b.clone()], &|t, v| weighted(t, t.add(v[0], v[1]).unwrap(), 90));
    run("sub", &[a.clone(), b.clone()], &|t, v| weighted(t, t.sub(v[0], v[1]).unwrap(), 91));
    run("mul", &[a.clone(), b.clone()], &|t, v| weighted(t, t.mul(v[0], v[1]).unwrap(), 92));
    run("div", &[a.clone(), b.map(|x| x.abs() + 0.5)], &|t, v| weighted(t, t.div(v[0], v[1]).unwrap(), 93));
    run("maximum", &[off_zero.clone(), Tensor::zeros(&[8, 1])], &|t, v| {
        weighted(t, t.maximum(v[0], v[1]).unwrap(), 94)
    });
    run("maximum with scalar", &[off_kink.clone(), Tensor::new(vec![], vec![0.1]).unwrap()], &|t, v| {
        weighted(t, t.maximum(v[0], v[1]).unwrap(), 117)
    });
    run("neg", &[a.clone()], &|t, v| weighted(t, t.neg(v[0]), 95));
    run("exp", &[a.clone()], &|t, v| weighted(t, t.exp(v[0]), 96));
    run("ln", &[pos.clone()], &|t, v| weighted(t, t.ln(v[0]), 97));
    run("sqrt", &[pos.clone()], &|t, v| weighted(t, t.sqrt(v[0]), 98));
    run("max_const", &[off_kink.clone()], &|t, v| weighted(t, t.max_const(v[0], 0.1), 99));
    run("relu", &[off_zero.clone()], &|t, v| weighted(t, t.relu(v[0]), 100));
    run("abs", &[off_zero], &|t, v| weighted(t, t.abs(v[0]), 101));
    run("tanh", &[a.clone()], &|t, v| weighted(t, t.tanh(v[0]), 102));
    run("sigmoid", &[a.clone()], &|t, v| weighted(t, t.sigmoid(v[0]), 103));
    run("square", &[a.clone()], &|t, v| weighted(t, t.square(v[0]), 104));
    run("scalar ops", &[a.clone()], &|t, v| weighted(t, t.add_scalar(t.mul_scalar(v[0], 1.7), 0.3), 105));
    run("matmul", &[random_tensor(&[8, 8], 4), random_tensor(&[8, 3], 5)], &|t, v| {
        weighted(t, t.matmul(v[0], v[1]).unwrap(), 106)
    });
    run("conv2d", &[a.clone(), random_tensor(&[3, 2, 3, 3], 7)], &|t, v| {
        weighted(t, t.conv2d(v[0], v[1], 1, 1).unwrap(), 107)
    });
    run("conv2d stride 2", &[random_tensor(&[2, 9, 9], 6), random_tensor(&[3, 2, 3, 3], 8)], &|t, v| {
        weighted(t, t.conv2d(v[0], v[1], 2, 1).unwrap(), 108)
    });
    run("conv3d", &[x3.clone(), random_tensor(&[2, 2, 3, 3, 3], 10)], &|t, v| {
        weighted(t, t.conv3d(v[0], v[1], 1).unwrap(), 109)
    });
    run("concat", &[a.clone(), random_tensor(&[2, 3, 8], 12)], &|t, v| {
        weighted(t, t.concat(&[v[0], v[1]], 1).unwrap(), 110)
    });
    run("slice", &[a.clone()], &|t, v| weighted(t, t.slice(v[0], 2, 1, 6).unwrap(), 111));
    run("reshape", &[a.clone()], &|t, v| weighted(t, t.reshape(v[0], &[16, 8]).unwrap(), 112));
    run("softmax", &[a.clone()], &|t, v| weighted(t, t.softmax(v[0], 1).unwrap(), 113));
    run("sum_axis", &[a.clone()], &|t, v| weighted(t, t.sum_axis(v[0], 0).unwrap(), 114));
    run("mean_axis", &[a.clone()], &|t, v| weighted(t, t.mean_axis(v[0], 2).unwrap(), 115));
    run("sum_all/mean_all", &[a.clone()], &|t, v| {
        let s = t.sum_all(t.square(v[0]));
        t.add(s, t.mean_all(t.exp(v[0]))).unwrap()
    });
    run("gather_bilinear", &[feat, coords], &|t, v| {
        weighted(t, t.gather_bilinear(v[0], v[1], None).unwrap(), 116)
    });
    let (m1, m2) = (mask.clone(), Tensor::ones(&[3, 8, 8]));
    run(
        "variance",
        &[random_tensor(&[2, 8, 8], 15), x3, random_tensor(&[2, 3, 8, 8], 17)],
        &move |t, v| weighted(t, t.variance(v[0], &[(v[1], m1.clone()), (v[2], m2.clone())], 10.0).unwrap(), 117),
    );
    out
}

/// Nadir camera at (x, y, z). A non-zero `y` keeps warped rows off the image
/// border, where the validity mask would make the loss discontinuous.
fn nadir(x: f64, y: f64, f: f64, c: f64, z: f64) -> CameraModel {
    let k = Matrix3::new(f, 0.0, c, 0.0, f, c, 0.0, 0.0, 1.0);
    let t = look_at(Vector3::new(x, y, z), Vector3::new(x, y, 0.0), Vector3::new(0.0, -1.0, 0.0)).unwrap();
    CameraModel::new(k, t, z - 4.0, 0.25, 33).unwrap()
}

/// A refinement stage (range, centred planes, deformable aggregation, warp,
/// variance, learned regularizer, regression and spread) on 8x8, 2 views.
pub fn stage_report() -> GradReport {
    let (c, hw, p, d) = (4usize, 8usize, 4usize, 8usize);
    let ref_cam = nadir(0.0, 0.0, 10.0, 3.5, 10.0);
    let src_cam = nadir(1.0, 0.37, 10.0, 3.5, 10.0);
    let pattern = point_pattern(PointScheme::Random, p, 3).unwrap();
    let bias2d = offset_bias(&pattern, 1.5, p + 1).unwrap();
    let inputs = vec![
        random_tensor(&[c, hw, hw], 21),
        random_tensor(&[c, hw, hw], 22),
        random_tensor(&[3, 2 * c, 3, 3], 23).map(|v| 0.1 * v),
        random_tensor(&[3 * p + 1, 2 * c, 3, 3], 24).map(|v| 0.1 * v),
        random_tensor(&[1, c, 3, 3], 25).map(|v| 0.3 * v),
        random_tensor(&[2, c, 3, 3, 3], 26).map(|v| 0.3 * v),
        random_tensor(&[1, 2, 3, 3, 3], 27).map(|v| 0.3 * v),
        random_tensor(&[hw, hw], 28).map(|v| 10.0 + 0.3 * v),
        random_tensor(&[hw, hw], 29).map(|v| 0.35 + 0.1 * v),
    ];
    check(&inputs, H, 1e-7, move |t, v| {
        let zero = |n: usize| t.constant(Tensor::zeros(&[n, 1, 1]));
        let sigma_min = t.constant(Tensor::scalar(0.2));
        let (lower, upper) = deform_range_tracked(t, v[7], v[8], sigma_min, 1.5, 0.01).unwrap();
        let planes = discretize(t, lower, upper, v[7], d, IntervalScheme::Clid).unwrap();
        let span = t.sub(t.slice(planes, 0, d - 1, d).unwrap(), t.slice(planes, 0, 0, 1).unwrap()).unwrap();
        let clamp_z = t.reshape(t.mul_scalar(span, 2.0 / (d - 1) as f64), &[hw, hw]).unwrap();
        let srcs = [v[1]];
        let cams = [src_cam.clone()];
        let input = PssInput {
            ref_feat: v[0],
            src_feats: &srcs,
            ref_cam: &ref_cam,
            src_cams: &cams,
            anchor_depth: v[7],
            clamp_z,
        };
        let weights = PssWeights {
            off3d: (v[2], zero(3)),
            off2d: (v[3], t.constant(bias2d.clone())),
            refview: (v[4], zero(1)),
        };
        let settings = PssSettings {
            points: p,
            clamp_px: 1.5,
            use_3d: true,
            use_2d: true,
        };
        let agg = pss_aggregate(t, &input, &weights, &settings).unwrap();
        let vol = warp_to_volume(t, v[1], &ref_cam, &src_cam, planes).unwrap();
        let cost = variance_cost(t, agg.feature, &[vol], 10.0).unwrap();
        let reg = Regularizer::Learned(vec![
            (v[5], t.constant(Tensor::zeros(&[2, 1, 1, 1]))),
            (v[6], t.constant(Tensor::zeros(&[1, 1, 1, 1]))),
        ]);
        let prob = regularize(t, cost, &reg).unwrap();
        let depth = regress_depth(t, planes, prob).unwrap();
        let sigma = hypothesis_variance(t, planes, prob, depth).unwrap();
        t.add(weighted(t, depth, 30), weighted(t, sigma, 31)).unwrap()
    })
}

/// Small model with every deformable part on and non-zero offset heads.
pub fn small_model(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        channels: [4, 4, 4],
        planes: [8, 6, 4],
        points: 4,
        clamp_px: 1.5,
        reg_channels: 2,
        seed,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&cfg).unwrap();
    for (i, (name, arr)) in params.arrays.iter_mut().enumerate() {
        if name.starts_with("pss.") && name.ends_with(".w") {
            let noise = random_tensor(arr.shape(), 500 + i as u64);
            *arr = noise.map(|v| 0.05 * v);
        } else if name.ends_with(".b") {
            // zero biases put ReLU inputs exactly on the kink
            let noise = random_tensor(arr.shape(), 900 + i as u64);
            *arr = noise.map(|v| 0.1 * v);
        }
    }
    params
}

/// Camera depth where the ray through (u, v) meets the plane z = 0.05 x.
fn plane_depth(cam: &CameraModel, u: f64, v: f64) -> f64 {
    let c = cam.lift(u, v, 0.0);
    let r = cam.lift(u, v, 1.0) - c;
    -(c.z - 0.05 * c.x) / (r.z - 0.05 * r.x)
}

/// Two textured 16x16 views of a tilted plane, with ground-truth depth.
pub fn tiny_scene() -> (ViewSet, Tensor) {
    let ref_cam = nadir(0.0, 0.0, 16.0, 7.5, 20.0);
    let src_cam = nadir(1.5, 0.5, 16.0, 7.5, 20.0);
    let texture = |x: f64, y: f64| 0.5 + 0.25 * (1.3 * x).sin() * (0.9 * y).cos() + 0.2 * (0.37 * x * y).sin();
    let render = |cam: &CameraModel| {
        Tensor::from_fn(&[3, 16, 16], |i| {
            let (ch, p) = (i / 256, i % 256);
            let (u, v) = ((p % 16) as f64, (p / 16) as f64);
            let w = cam.lift(u, v, plane_depth(cam, u, v));
            texture(w.x, w.y) * (1.0 - 0.1 * ch as f64)
        })
    };
    let gt = Tensor::from_fn(&[16, 16], |p| plane_depth(&ref_cam, (p % 16) as f64, (p / 16) as f64));
    let views = ViewSet {
        images: vec![render(&ref_cam), render(&src_cam)],
        cams: vec![ref_cam, src_cam],
    };
    (views, gt)
}

/// Multi-stage L1 loss of the whole cascade on 16x16, probed at every
/// `stride`-th element of every parameter array.
pub fn pipeline_report(stride: usize) -> GradReport {
    let params = small_model(7);
    let (views, gt) = tiny_scene();
    let names: Vec<String> = params.arrays.keys().cloned().collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| params.arrays[n].clone()).collect();
    let cfg = params.config.clone();
    check_strided(&inputs, CASCADE_H, 1e-5, stride, move |t, v| {
        let bound = deform_mvs::model::BoundParams {
            vars: names.iter().cloned().zip(v.iter().copied()).collect(),
        };
        let outs = forward(t, &bound, &cfg, &views).unwrap();
        scene_loss(t, &outs, &gt, &[0.5, 1.0, 2.0]).unwrap()
    })
}
