//! Forward and vector-Jacobian kernels for the heavier tape primitives.
//!
//! Everything here works on flat row-major slices; shape validation happens
//! in the tape before these are called.

/// Output positions `o` whose input index `o*stride + k - pad` falls inside `[0, n_in)`.
fn valid_range(n_out: usize, n_in: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let top = n_in as isize - 1 + pad as isize - k as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn conv2d_forward(d: &Conv2dDims, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d.c_out * d.h_out * d.w_out];
    for o in 0..d.c_out {
        let out_o = &mut out[o * d.h_out * d.w_out..(o + 1) * d.h_out * d.w_out];
        for c in 0..d.c_in {
            let in_c = &input[c * d.h * d.w..(c + 1) * d.h * d.w];
            for ky in 0..d.kh {
                let (y0, y1) = valid_range(d.h_out, d.h, ky, d.stride, d.pad);
                for kx in 0..d.kw {
                    let wv = kernel[((o * d.c_in + c) * d.kh + ky) * d.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(d.w_out, d.w, kx, d.stride, d.pad);
                    for oy in y0..y1 {
                        let iy = oy * d.stride + ky - d.pad;
                        let row_in = &in_c[iy * d.w..(iy + 1) * d.w];
                        let row_out = &mut out_o[oy * d.w_out..(oy + 1) * d.w_out];
                        if d.stride == 1 {
                            let off = kx as isize - d.pad as isize;
                            for ox in x0..x1 {
                                row_out[ox] += wv * row_in[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in x0..x1 {
                                row_out[ox] += wv * row_in[ox * d.stride + kx - d.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_kernel).
pub(crate) fn conv2d_backward(
    d: &Conv2dDims,
    input: &[f64],
    kernel: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut gi = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    for o in 0..d.c_out {
        let g_o = &grad[o * d.h_out * d.w_out..(o + 1) * d.h_out * d.w_out];
        for c in 0..d.c_in {
            let base = c * d.h * d.w;
            for ky in 0..d.kh {
                let (y0, y1) = valid_range(d.h_out, d.h, ky, d.stride, d.pad);
                for kx in 0..d.kw {
                    let ki = ((o * d.c_in + c) * d.kh + ky) * d.kw + kx;
                    let wv = kernel[ki];
                    let (x0, x1) = valid_range(d.w_out, d.w, kx, d.stride, d.pad);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * d.stride + ky - d.pad;
                        let row = base + iy * d.w;
                        for ox in x0..x1 {
                            let ix = ox * d.stride + kx - d.pad;
                            let g = g_o[oy * d.w_out + ox];
                            acc += g * input[row + ix];
                            gi[row + ix] += wv * g;
                        }
                    }
                    gk[ki] += acc;
                }
            }
        }
    }
    (gi, gk)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv3dDims {
    pub c_in: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub d_out: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn conv3d_forward(d: &Conv3dDims, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let plane_in = d.h * d.w;
    let vol_in = d.d * plane_in;
    let plane_out = d.h_out * d.w_out;
    let vol_out = d.d_out * plane_out;
    let mut out = vec![0.0; d.c_out * vol_out];
    for o in 0..d.c_out {
        for c in 0..d.c_in {
            for kz in 0..d.kd {
                let (z0, z1) = valid_range(d.d_out, d.d, kz, 1, d.pad);
                for ky in 0..d.kh {
                    let (y0, y1) = valid_range(d.h_out, d.h, ky, 1, d.pad);
                    for kx in 0..d.kw {
                        let wv = kernel[(((o * d.c_in + c) * d.kd + kz) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(d.w_out, d.w, kx, 1, d.pad);
                        let off = kx as isize - d.pad as isize;
                        for oz in z0..z1 {
                            let iz = oz + kz - d.pad;
                            for oy in y0..y1 {
                                let iy = oy + ky - d.pad;
                                let ib = c * vol_in + iz * plane_in + iy * d.w;
                                let ob = o * vol_out + oz * plane_out + oy * d.w_out;
                                let row_in = &input[ib..ib + d.w];
                                let row_out = &mut out[ob..ob + d.w_out];
                                for ox in x0..x1 {
                                    row_out[ox] += wv * row_in[(ox as isize + off) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv3d_backward(
    d: &Conv3dDims,
    input: &[f64],
    kernel: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plane_in = d.h * d.w;
    let vol_in = d.d * plane_in;
    let plane_out = d.h_out * d.w_out;
    let vol_out = d.d_out * plane_out;
    let mut gi = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    for o in 0..d.c_out {
        for c in 0..d.c_in {
            for kz in 0..d.kd {
                let (z0, z1) = valid_range(d.d_out, d.d, kz, 1, d.pad);
                for ky in 0..d.kh {
                    let (y0, y1) = valid_range(d.h_out, d.h, ky, 1, d.pad);
                    for kx in 0..d.kw {
                        let ki = (((o * d.c_in + c) * d.kd + kz) * d.kh + ky) * d.kw + kx;
                        let wv = kernel[ki];
                        let (x0, x1) = valid_range(d.w_out, d.w, kx, 1, d.pad);
                        let off = kx as isize - d.pad as isize;
                        let mut acc = 0.0;
                        for oz in z0..z1 {
                            let iz = oz + kz - d.pad;
                            for oy in y0..y1 {
                                let iy = oy + ky - d.pad;
                                let ib = c * vol_in + iz * plane_in + iy * d.w;
                                let ob = o * vol_out + oz * plane_out + oy * d.w_out;
                                for ox in x0..x1 {
                                    let ix = (ox as isize + off) as usize;
                                    let g = grad[ob + ox];
                                    acc += g * input[ib + ix];
                                    gi[ib + ix] += wv * g;
                                }
                            }
                        }
                        gk[ki] += acc;
                    }
                }
            }
        }
    }
    (gi, gk)
}

/// The four bilinear taps around `(x, y)`: (flat pixel index or None when outside, weight,
/// d weight / dx, d weight / dy).
#[inline]
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(Option<usize>, f64, f64, f64); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as i64, y0 as i64);
    let idx = |cx: i64, cy: i64| -> Option<usize> {
        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
            Some(cy as usize * w + cx as usize)
        } else {
            None
        }
    };
    [
        (idx(xi, yi), (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (idx(xi + 1, yi), fx * (1.0 - fy), 1.0 - fy, -fx),
        (idx(xi, yi + 1), (1.0 - fx) * fy, -fy, 1.0 - fx),
        (idx(xi + 1, yi + 1), fx * fy, fy, fx),
    ]
}

/// Samples `feat` ([C,H,W]) at `m` points given as interleaved (x, y) pairs.
pub(crate) fn gather_forward(
    feat: &[f64],
    c: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    mask: Option<&[f64]>,
) -> Vec<f64> {
    let m = coords.len() / 2;
    let mut out = vec![0.0; c * m];
    for p in 0..m {
        if mask.is_some_and(|mk| mk[p] <= 0.5) {
            continue;
        }
        let taps = bilinear_taps(coords[2 * p], coords[2 * p + 1], h, w);
        for (idx, wt, _, _) in taps {
            if let Some(i) = idx {
                if wt == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out[ch * m + p] += wt * feat[ch * h * w + i];
                }
            }
        }
    }
    out
}

/// Returns (grad_feat, grad_coords).
pub(crate) fn gather_backward(
    feat: &[f64],
    c: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    mask: Option<&[f64]>,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let m = coords.len() / 2;
    let mut gf = vec![0.0; feat.len()];
    let mut gc = vec![0.0; coords.len()];
    for p in 0..m {
        if mask.is_some_and(|mk| mk[p] <= 0.5) {
            continue;
        }
        let taps = bilinear_taps(coords[2 * p], coords[2 * p + 1], h, w);
        let (mut gx, mut gy) = (0.0, 0.0);
        for (idx, wt, dwx, dwy) in taps {
            if let Some(i) = idx {
                for ch in 0..c {
                    let g = grad[ch * m + p];
                    let f = feat[ch * h * w + i];
                    gf[ch * h * w + i] += wt * g;
                    gx += dwx * f * g;
                    gy += dwy * f * g;
                }
            }
        }
        gc[2 * p] = gx;
        gc[2 * p + 1] = gy;
    }
    (gf, gc)
}

/// Population variance of the reference feature and every valid warped source
/// value, accumulated in ascending value order so the result does not depend
/// on the order of the sources.
pub(crate) fn variance_forward(
    reference: &[f64],
    volumes: &[&[f64]],
    masks: &[&[f64]],
    c: usize,
    planes: usize,
    hw: usize,
    empty_cost: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; c * planes * hw];
    let mut vals: Vec<f64> = Vec::with_capacity(volumes.len() + 1);
    for ch in 0..c {
        for d in 0..planes {
            for p in 0..hw {
                let o = (ch * planes + d) * hw + p;
                vals.clear();
                vals.push(reference[ch * hw + p]);
                for (vol, mask) in volumes.iter().zip(masks) {
                    if mask[d * hw + p] > 0.5 {
                        vals.push(vol[o]);
                    }
                }
                out[o] = if vals.len() < 2 {
                    empty_cost
                } else {
                    sorted_variance(&mut vals).1
                };
            }
        }
    }
    out
}

/// Returns (mean, variance) after sorting `vals` in place.
pub(crate) fn sorted_variance(vals: &mut [f64]) -> (f64, f64) {
    vals.sort_by(|a, b| a.total_cmp(b));
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Returns (grad_reference, grad per volume).
pub(crate) fn variance_backward(
    reference: &[f64],
    volumes: &[&[f64]],
    masks: &[&[f64]],
    c: usize,
    planes: usize,
    hw: usize,
    grad: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut gr = vec![0.0; reference.len()];
    let mut gv: Vec<Vec<f64>> = volumes.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut vals: Vec<f64> = Vec::with_capacity(volumes.len() + 1);
    for ch in 0..c {
        for d in 0..planes {
            for p in 0..hw {
                let o = (ch * planes + d) * hw + p;
                vals.clear();
                vals.push(reference[ch * hw + p]);
                for (vol, mask) in volumes.iter().zip(masks) {
                    if mask[d * hw + p] > 0.5 {
                        vals.push(vol[o]);
                    }
                }
                if vals.len() < 2 {
                    continue;
                }
                let m = vals.len() as f64;
                let (mean, _) = sorted_variance(&mut vals);
                let g = grad[o] * 2.0 / m;
                gr[ch * hw + p] += g * (reference[ch * hw + p] - mean);
                for ((vol, mask), gvol) in volumes.iter().zip(masks).zip(gv.iter_mut()) {
                    if mask[d * hw + p] > 0.5 {
                        gvol[o] += g * (vol[o] - mean);
                    }
                }
            }
        }
    }
    (gr, gv)
}
