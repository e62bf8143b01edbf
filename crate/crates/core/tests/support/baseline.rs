//! Plain-array cascade without deformable parts: fixed depth ranges, uniform
//! planes, variance cost and a 3D conv regularizer. Written against flat
//! `Vec<f64>` buffers so it shares no code with the tape.

use std::collections::BTreeMap;

use deform_mvs::camera::CameraModel;
use deform_mvs::config::ModelConfig;
use deform_mvs::Tensor;
use nalgebra::{Matrix3, Vector3};

/// Channel-major map [c,h,w].
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

fn arr<'a>(p: &'a BTreeMap<String, Tensor>, name: &str) -> &'a Tensor {
    p.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

fn conv2d(x: &Map, w: &Tensor, b: &Tensor) -> Map {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    assert_eq!(i, x.c);
    let mut out = vec![0.0; o * x.h * x.w];
    for oc in 0..o {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = b.data()[oc];
                for ic in 0..i {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as i64 + ky as i64 - 1, xx as i64 + kx as i64 - 1);
                            if sy < 0 || sx < 0 || sy >= x.h as i64 || sx >= x.w as i64 {
                                continue;
                            }
                            s += w.at(&[oc, ic, ky, kx]) * x.at(ic, sy as usize, sx as usize);
                        }
                    }
                }
                out[(oc * x.h + y) * x.w + xx] = s;
            }
        }
    }
    Map { c: o, h: x.h, w: x.w, v: out }
}

fn relu(mut x: Map) -> Map {
    for v in &mut x.v {
        *v = v.max(0.0);
    }
    x
}

/// Tent-weighted average around every `f`-th pixel (zero outside the map).
fn every(x: &Map, f: usize) -> Map {
    let (h, w) = (x.h / f, x.w / f);
    let r = f as i64 - 1;
    let tap = |d: i64| (f as i64 - d.abs()) as f64 / f as f64;
    let mut v = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sy, sx) = ((y * f) as i64 + dy, (xx * f) as i64 + dx);
                        if sy >= 0 && sx >= 0 && sy < x.h as i64 && sx < x.w as i64 {
                            s += tap(dy) * tap(dx) / (f * f) as f64 * x.at(c, sy as usize, sx as usize);
                        }
                    }
                }
                v.push(s);
            }
        }
    }
    Map { c: x.c, h, w, v }
}

fn standardize(img: &Tensor) -> Map {
    let s = img.shape();
    let n = img.numel() as f64;
    let mean = img.data().iter().sum::<f64>() / n;
    let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-6);
    Map {
        c: s[0],
        h: s[1],
        w: s[2],
        v: img.data().iter().map(|v| (v - mean) / sd).collect(),
    }
}

/// Features coarse to fine.
pub fn features(img: &Tensor, p: &BTreeMap<String, Tensor>) -> [Map; 3] {
    let conv = |x: &Map, n: &str| conv2d(x, arr(p, &format!("{n}.w")), arr(p, &format!("{n}.b")));
    let x = standardize(img);
    let h3 = relu(conv(&x, "feat.s3.c0"));
    let f3 = conv(&h3, "feat.s3.c1");
    let h2 = every(&relu(conv(&h3, "feat.s2.c0")), 4);
    let f2 = conv(&h2, "feat.s2.c1");
    let h1 = every(&relu(conv(&h2, "feat.s1.c0")), 4);
    let f1 = conv(&h1, "feat.s1.c1");
    [f1, f2, f3]
}

fn scaled_k(cam: &CameraModel, s: f64) -> Matrix3<f64> {
    let mut k = cam.k;
    for c in 0..3 {
        k[(0, c)] *= s;
        k[(1, c)] *= s;
    }
    k
}

/// Samples channel `c` of `m` at (x, y), treating pixels outside the map as zero.
fn bilinear(m: &Map, c: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let get = |xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= m.w as f64 || yi >= m.h as f64 {
            0.0
        } else {
            m.at(c, yi as usize, xi as usize)
        }
    };
    let mut s = 0.0;
    for (dx, dy, wt) in [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
        (1.0, 0.0, fx * (1.0 - fy)),
        (0.0, 1.0, (1.0 - fx) * fy),
        (1.0, 1.0, fx * fy),
    ] {
        if wt != 0.0 {
            s += wt * get(x0 + dx, y0 + dy);
        }
    }
    s
}

/// Per-pixel plane depths [d][h*w].
type Planes = Vec<Vec<f64>>;

/// Cost [c][d][h*w] from the reference feature and all sources.
fn cost_volume(refm: &Map, srcs: &[&Map], ref_cam: &CameraModel, src_cams: &[&CameraModel], s: f64, planes: &Planes, empty: f64) -> Vec<f64> {
    let (h, w, c, d) = (refm.h, refm.w, refm.c, planes.len());
    let hw = h * w;
    let k_ref = scaled_k(ref_cam, s);
    let k_ref_inv = k_ref.try_inverse().unwrap();
    let (r_ref, t_ref) = (ref_cam.rotation(), ref_cam.translation());
    let mut out = vec![0.0; c * d * hw];
    for di in 0..d {
        for p in 0..hw {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            let z = planes[di][p];
            let cam_pt = k_ref_inv * Vector3::new(x, y, 1.0) * z;
            let world = r_ref.transpose() * (cam_pt - t_ref);
            let mut samples: Vec<Option<(f64, f64)>> = Vec::new();
            for cam in src_cams {
                let local = cam.rotation() * world + cam.translation();
                let q = scaled_k(cam, s) * local;
                let ok_z = q.z > 1e-6;
                let (u, v) = if ok_z { (q.x / q.z, q.y / q.z) } else { (f64::NAN, f64::NAN) };
                let inside = ok_z && u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64;
                samples.push(inside.then_some((u, v)));
            }
            for ch in 0..c {
                let mut vals = vec![refm.at(ch, p / w, p % w)];
                for (m, smp) in srcs.iter().zip(&samples) {
                    if let Some((u, v)) = smp {
                        vals.push(bilinear(m, ch, *u, *v));
                    }
                }
                let o = (ch * d + di) * hw + p;
                out[o] = if vals.len() < 2 {
                    empty
                } else {
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
                };
            }
        }
    }
    out
}

fn conv3d(x: &[f64], cin: usize, d: usize, h: usize, w: usize, wt: &Tensor, b: &Tensor) -> Vec<f64> {
    let o = wt.shape()[0];
    assert_eq!(wt.shape()[1], cin);
    let mut out = vec![0.0; o * d * h * w];
    for oc in 0..o {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = b.data()[oc];
                    for ic in 0..cin {
                        for kz in 0..3 {
                            let sz = z as i64 + kz as i64 - 1;
                            if sz < 0 || sz >= d as i64 {
                                continue;
                            }
                            for ky in 0..3 {
                                let sy = y as i64 + ky as i64 - 1;
                                if sy < 0 || sy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as i64 + kx as i64 - 1;
                                    if sx < 0 || sx >= w as i64 {
                                        continue;
                                    }
                                    s += wt.at(&[oc, ic, kz, ky, kx])
                                        * x[((ic * d + sz as usize) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[((oc * d + z) * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

fn upsample_linear(m: &[f64], hs: usize, ws: usize, h: usize, w: usize) -> Vec<f64> {
    let map = Map { c: 1, h: hs, w: ws, v: m.to_vec() };
    let (ry, rx) = (hs as f64 / h as f64, ws as f64 / w as f64);
    (0..h * w)
        .map(|p| {
            let x = ((p % w) as f64 * rx).min((ws - 1) as f64);
            let y = ((p / w) as f64 * ry).min((hs - 1) as f64);
            bilinear(&map, 0, x, y)
        })
        .collect()
}

/// Stage depth maps, coarse to fine, for reference view 0.
pub fn cascade(images: &[Tensor], cams: &[CameraModel], p: &BTreeMap<String, Tensor>, cfg: &ModelConfig) -> Vec<Vec<f64>> {
    assert!(!cfg.pss && !cfg.dhd_range && !cfg.reg_bypass);
    let feats: Vec<[Map; 3]> = images.iter().map(|im| features(im, p)).collect();
    let r = &cams[0];
    let (dmin, dmax) = (r.depth_min, r.depth_min + r.depth_interval * (r.num_planes - 1) as f64);
    let base = (dmax - dmin) / (cfg.planes[0] - 1) as f64;
    let scales = [1.0 / 16.0, 0.25, 1.0];
    let mut depths: Vec<Vec<f64>> = Vec::new();
    let mut prev_hw = (0, 0);
    for k in 0..3 {
        let refm = &feats[0][k];
        let (h, w) = (refm.h, refm.w);
        let hw = h * w;
        let d = cfg.planes[k];
        let planes: Planes = match depths.last() {
            None => (0..d)
                .map(|i| vec![if i == d - 1 { dmax } else { dmin + base * i as f64 }; hw])
                .collect(),
            Some(prev) => {
                let up = upsample_linear(prev, prev_hw.0, prev_hw.1, h, w);
                let half = 0.5 * (d - 1) as f64 * base * cfg.interval_ratios[k];
                (0..d)
                    .map(|i| {
                        up.iter()
                            .map(|&c| {
                                let lo = (c - half).max(cfg.depth_floor);
                                let hi = c + half;
                                lo + (hi - lo) * (i as f64 / (d - 1) as f64)
                            })
                            .collect()
                    })
                    .collect()
            }
        };
        let srcs: Vec<&Map> = feats[1..].iter().map(|f| &f[k]).collect();
        let src_cams: Vec<&CameraModel> = cams[1..].iter().collect();
        let mut x = cost_volume(refm, &srcs, r, &src_cams, scales[k], &planes, cfg.empty_cost);
        let mut cin = refm.c;
        let s = k + 1;
        for j in 0..cfg.reg_layers {
            let wt = arr(p, &format!("reg.{s}.l{j}.w"));
            x = conv3d(&x, cin, d, h, w, wt, arr(p, &format!("reg.{s}.l{j}.b")));
            cin = wt.shape()[0];
            if j + 1 < cfg.reg_layers {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let depth: Vec<f64> = (0..hw)
            .map(|px| {
                let m = (0..d).map(|i| -x[i * hw + px]).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = (0..d).map(|i| (-x[i * hw + px] - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..d).map(|i| e[i] / z * planes[i][px]).sum()
            })
            .collect();
        depths.push(depth);
        prev_hw = (h, w);
    }
    depths
}
