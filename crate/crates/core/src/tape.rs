//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in execution order; a [`Var`] is a
//! handle to one recorded value. Parents always precede children, so the
//! backward pass is a single reverse sweep that visits each node once.
//! A tape can be swept only once; a second `backward` is an error.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{MvsError, Result};
use crate::kernels::{self, Conv2dDims, Conv3dDims};
use crate::tensor::{broadcast_shapes, for_each_broadcast, reduce_to_shape, split_axis, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    MaxConst(Var, f64),
    Maximum(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        dims: Conv2dDims,
    },
    Conv3d {
        input: Var,
        kernel: Var,
        dims: Conv3dDims,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Softmax {
        src: Var,
        axis: usize,
    },
    SumAxis {
        src: Var,
        axis: usize,
    },
    MeanAxis {
        src: Var,
        axis: usize,
    },
    GatherBilinear {
        feat: Var,
        coords: Var,
        mask: Option<Rc<Tensor>>,
    },
    Variance {
        reference: Var,
        volumes: Vec<Var>,
        masks: Vec<Rc<Tensor>>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Maximum(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a) | Op::Exp(a) | Op::Ln(a) | Op::Sqrt(a) | Op::MaxConst(a, _) | Op::Reshape(a) => {
                vec![*a]
            }
            Op::Conv2d { input, kernel, .. } | Op::Conv3d { input, kernel, .. } => vec![*input, *kernel],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { src, .. } | Op::Softmax { src, .. } | Op::SumAxis { src, .. } | Op::MeanAxis { src, .. } => {
                vec![*src]
            }
            Op::GatherBilinear { feat, coords, .. } => vec![*feat, *coords],
            Op::Variance {
                reference, volumes, ..
            } => {
                let mut v = vec![*reference];
                v.extend(volumes);
                v
            }
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Single-owner record of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Gradients of a scalar loss with respect to every tracked leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            let data: Vec<f64> = acc.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
            *acc = Tensor::from_parts(acc.shape().to_vec(), data);
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        let tracked = op.parents().iter().any(|p| inner.nodes[p.0].tracked);
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var(inner.nodes.len() - 1)
    }

    fn leaf(&self, value: Tensor, tracked: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            tracked,
        });
        Var(inner.nodes.len() - 1)
    }

    /// Records a leaf whose gradient will be reported by [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records an untracked leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Untracked copy of `v`; gradients stop here.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(inner.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].tracked
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_with(&vb, f).map_err(|_| MvsError::ShapeMismatch {
            op: name,
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        Ok(self.push(out, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    /// Elementwise `max(a, c)`; the gradient passes only where `a > c`.
    pub fn max_const(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x.max(c));
        self.push(out, Op::MaxConst(a, c))
    }

    /// Elementwise `max(a, b)` with broadcasting; ties send the gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", f64::max, Op::Maximum(a, b))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(MvsError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let out = matmul_raw(va.data(), vb.data(), sa[0], sa[1], sb[1]);
        Ok(self.push(Tensor::from_parts(vec![sa[0], sb[1]], out), Op::MatMul(a, b)))
    }

    /// Cross-correlation of `input` [C,H,W] with `kernel` [O,C,kH,kW].
    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (vi, vk) = (self.value(input), self.value(kernel));
        let (si, sk) = (vi.shape(), vk.shape());
        let mismatch = || MvsError::ShapeMismatch {
            op: "conv2d",
            lhs: si.to_vec(),
            rhs: sk.to_vec(),
        };
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] {
            return Err(mismatch());
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 || stride == 0 {
            return Err(MvsError::invalid(format!(
                "conv2d needs odd kernel sizes and positive stride, got {sk:?} stride {stride}"
            )));
        }
        let h_out = conv_out_size(si[1], sk[2], stride, padding)?;
        let w_out = conv_out_size(si[2], sk[3], stride, padding)?;
        let dims = Conv2dDims {
            c_in: si[0],
            h: si[1],
            w: si[2],
            c_out: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad: padding,
            h_out,
            w_out,
        };
        let out = kernels::conv2d_forward(&dims, vi.data(), vk.data());
        Ok(self.push(
            Tensor::from_parts(vec![dims.c_out, h_out, w_out], out),
            Op::Conv2d { input, kernel, dims },
        ))
    }

    /// Stride-1 3D cross-correlation of `input` [C,D,H,W] with `kernel` [O,C,kD,kH,kW].
    pub fn conv3d(&self, input: Var, kernel: Var, padding: usize) -> Result<Var> {
        let (vi, vk) = (self.value(input), self.value(kernel));
        let (si, sk) = (vi.shape(), vk.shape());
        if si.len() != 4 || sk.len() != 5 || sk[1] != si[0] {
            return Err(MvsError::ShapeMismatch {
                op: "conv3d",
                lhs: si.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        if sk[2..].iter().any(|k| k % 2 == 0) {
            return Err(MvsError::invalid(format!("conv3d needs odd kernel sizes, got {sk:?}")));
        }
        let dims = Conv3dDims {
            c_in: si[0],
            d: si[1],
            h: si[2],
            w: si[3],
            c_out: sk[0],
            kd: sk[2],
            kh: sk[3],
            kw: sk[4],
            pad: padding,
            d_out: conv_out_size(si[1], sk[2], 1, padding)?,
            h_out: conv_out_size(si[2], sk[3], 1, padding)?,
            w_out: conv_out_size(si[3], sk[4], 1, padding)?,
        };
        let out = kernels::conv3d_forward(&dims, vi.data(), vk.data());
        Ok(self.push(
            Tensor::from_parts(vec![dims.c_out, dims.d_out, dims.h_out, dims.w_out], out),
            Op::Conv3d { input, kernel, dims },
        ))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(MvsError::invalid("concat of zero tensors"));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values[0].shape().to_vec();
        if axis >= first.len() {
            return Err(MvsError::invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(MvsError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&self, src: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(src);
        let s = v.shape();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(MvsError::invalid(format!(
                "slice [{start},{end}) on axis {axis} invalid for shape {s:?}"
            )));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&v.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { src, axis, start }))
    }

    pub fn reshape(&self, src: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(src).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(src)))
    }

    /// Numerically stable softmax along `axis` (max subtracted before exponentiation).
    pub fn softmax(&self, src: Var, axis: usize) -> Result<Var> {
        let v = self.value(src);
        if axis >= v.ndim() {
            return Err(MvsError::invalid(format!("softmax axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..n {
                    let e = (x[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    out[at(k)] /= s;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(v.shape().to_vec(), out), Op::Softmax { src, axis }))
    }

    fn reduce_axis(&self, src: Var, axis: usize, mean: bool) -> Result<Var> {
        let v = self.value(src);
        if axis >= v.ndim() {
            return Err(MvsError::invalid(format!("reduction axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &val) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += val;
                }
            }
        }
        if mean {
            let inv = 1.0 / n as f64;
            out.iter_mut().for_each(|x| *x *= inv);
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let op = if mean {
            Op::MeanAxis { src, axis }
        } else {
            Op::SumAxis { src, axis }
        };
        Ok(self.push(Tensor::from_parts(shape, out), op))
    }

    /// Sum along `axis`, dropping it.
    pub fn sum_axis(&self, src: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(src, axis, false)
    }

    /// Mean along `axis`, dropping it.
    pub fn mean_axis(&self, src: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(src, axis, true)
    }

    /// Bilinear gather from `feat` [C,H,W] at `coords` [..., 2] holding (x, y)
    /// pixel coordinates. Output is [C, ...]. Neighbours outside the image
    /// contribute zero; positions where `mask` is zero produce zero.
    pub fn gather_bilinear(&self, feat: Var, coords: Var, mask: Option<Tensor>) -> Result<Var> {
        let (vf, vc) = (self.value(feat), self.value(coords));
        let (sf, sc) = (vf.shape(), vc.shape());
        if sf.len() != 3 || sc.last() != Some(&2) {
            return Err(MvsError::ShapeMismatch {
                op: "gather_bilinear",
                lhs: sf.to_vec(),
                rhs: sc.to_vec(),
            });
        }
        let lead = &sc[..sc.len() - 1];
        if let Some(m) = &mask {
            if m.shape() != lead {
                return Err(MvsError::ShapeMismatch {
                    op: "gather_bilinear mask",
                    lhs: lead.to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let out = kernels::gather_forward(vf.data(), sf[0], sf[1], sf[2], vc.data(), mask.as_ref().map(|m| m.data()));
        let mut shape = vec![sf[0]];
        shape.extend_from_slice(lead);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherBilinear {
                feat,
                coords,
                mask: mask.map(Rc::new),
            },
        ))
    }

    /// Per-element population variance across the reference feature [C,H,W]
    /// and the valid entries of each warped volume [C,D,H,W] (mask [D,H,W]).
    /// Elements with fewer than two contributors get `empty_cost`.
    pub fn variance(&self, reference: Var, volumes: &[(Var, Tensor)], empty_cost: f64) -> Result<Var> {
        let vr = self.value(reference);
        let sr = vr.shape();
        if sr.len() != 3 || volumes.is_empty() {
            return Err(MvsError::invalid(format!(
                "variance needs a [C,H,W] reference and at least one volume, got {sr:?} and {} volumes",
                volumes.len()
            )));
        }
        let (c, h, w) = (sr[0], sr[1], sr[2]);
        let vols: Vec<Rc<Tensor>> = volumes.iter().map(|(v, _)| self.value(*v)).collect();
        let planes = vols[0].shape().get(1).copied().unwrap_or(0);
        for (vol, (_, mask)) in vols.iter().zip(volumes) {
            if vol.shape() != [c, planes, h, w] || mask.shape() != [planes, h, w] {
                return Err(MvsError::ShapeMismatch {
                    op: "variance",
                    lhs: vec![c, planes, h, w],
                    rhs: vol.shape().to_vec(),
                });
            }
        }
        let vol_data: Vec<&[f64]> = vols.iter().map(|v| v.data()).collect();
        let mask_data: Vec<&[f64]> = volumes.iter().map(|(_, m)| m.data()).collect();
        let out = kernels::variance_forward(vr.data(), &vol_data, &mask_data, c, planes, h * w, empty_cost);
        Ok(self.push(
            Tensor::from_parts(vec![c, planes, h, w], out),
            Op::Variance {
                reference,
                volumes: volumes.iter().map(|(v, _)| *v).collect(),
                masks: volumes.iter().map(|(_, m)| Rc::new(m.clone())).collect(),
            },
        ))
    }

    // ---- composites -------------------------------------------------------

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let s = self.scalar(c);
        self.add(a, s).expect("scalar broadcasts")
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        let s = self.scalar(c);
        self.mul(a, s).expect("scalar broadcasts")
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn relu(&self, a: Var) -> Var {
        self.max_const(a, 0.0)
    }

    /// `|a|` as `max(a,0) + max(-a,0)`.
    pub fn abs(&self, a: Var) -> Var {
        let p = self.max_const(a, 0.0);
        let n = self.neg(a);
        let n = self.max_const(n, 0.0);
        self.add(p, n).expect("same shape")
    }

    /// `1 / (1 + exp(-a))`.
    pub fn sigmoid(&self, a: Var) -> Var {
        let e = self.exp(self.neg(a));
        let d = self.add_scalar(e, 1.0);
        let one = self.scalar(1.0);
        self.div(one, d).expect("scalar broadcasts")
    }

    /// `tanh(a) = 2 sigmoid(2a) - 1`.
    pub fn tanh(&self, a: Var) -> Var {
        let s = self.sigmoid(self.mul_scalar(a, 2.0));
        self.add_scalar(self.mul_scalar(s, 2.0), -1.0)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n]).expect("numel preserved");
        self.sum_axis(flat, 0).expect("axis 0 exists")
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n]).expect("numel preserved");
        self.mean_axis(flat, 0).expect("axis 0 exists")
    }

    // ---- backward ---------------------------------------------------------

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(MvsError::TapeConsumed);
        }
        let loss_shape = inner.nodes[loss.0].value.shape().to_vec();
        if inner.nodes[loss.0].value.numel() != 1 {
            return Err(MvsError::NonScalarLoss(loss_shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&loss_shape));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(Var(i), g);
                continue;
            }
            for (parent, pg) in vjp(nodes, node, &g) {
                if nodes[parent.0].tracked {
                    accumulate(&mut grads[parent.0], pg);
                }
            }
        }
        Ok(out)
    }
}

fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = n + 2 * pad;
    if span < k || (span - k) % stride != 0 {
        return Err(MvsError::invalid(format!(
            "convolution output size ({n} + 2*{pad} - {k})/{stride} + 1 is not integral"
        )));
    }
    Ok((span - k) / stride + 1)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Elementwise binary gradient: `da(x, y, g)` and `db(x, y, g)` per broadcast element.
fn binary_vjp(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    da: impl Fn(f64, f64, f64) -> f64,
    db: impl Fn(f64, f64, f64) -> f64,
) -> (Tensor, Tensor) {
    let out_shape = broadcast_shapes(a.shape(), b.shape()).expect("checked in forward");
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for_each_broadcast(&out_shape, a.shape(), b.shape(), |o, ia, ib| {
        let (x, y, gv) = (a.data()[ia], b.data()[ib], g.data()[o]);
        ga[ia] += da(x, y, gv);
        gb[ib] += db(x, y, gv);
    });
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

fn unary_vjp(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().zip(g.data()).map(|(&x, &g)| f(x, g)).collect(),
    )
}

fn vjp(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
    let val = |v: &Var| -> &Tensor { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to_shape(g, val(a).shape())),
            (*b, reduce_to_shape(g, val(b).shape())),
        ],
        Op::Sub(a, b) => {
            let gb = reduce_to_shape(g, val(b).shape()).map(|x| -x);
            vec![(*a, reduce_to_shape(g, val(a).shape())), (*b, gb)]
        }
        Op::Mul(a, b) => {
            let (ga, gb) = binary_vjp(val(a), val(b), g, |_, y, g| g * y, |x, _, g| g * x);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Div(a, b) => {
            let (ga, gb) = binary_vjp(val(a), val(b), g, |_, y, g| g / y, |x, y, g| -g * x / (y * y));
            vec![(*a, ga), (*b, gb)]
        }
        Op::Neg(a) => vec![(*a, g.map(|x| -x))],
        Op::Exp(a) => vec![(*a, unary_vjp(&node.value, g, |y, g| y * g))],
        Op::Ln(a) => vec![(*a, unary_vjp(val(a), g, |x, g| g / x))],
        Op::Sqrt(a) => vec![(*a, unary_vjp(&node.value, g, |y, g| 0.5 * g / y))],
        Op::MaxConst(a, c) => {
            let c = *c;
            vec![(*a, unary_vjp(val(a), g, |x, g| if x > c { g } else { 0.0 }))]
        }
        Op::Maximum(a, b) => {
            let (ga, gb) = binary_vjp(
                val(a),
                val(b),
                g,
                |x, y, g| if x >= y { g } else { 0.0 },
                |x, y, g| if x >= y { 0.0 } else { g },
            );
            vec![(*a, ga), (*b, gb)]
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let ga = matmul_raw(g.data(), &transpose(vb.data(), k, n), m, n, k);
            let gb = matmul_raw(&transpose(va.data(), m, k), g.data(), k, m, n);
            vec![
                (*a, Tensor::from_parts(vec![m, k], ga)),
                (*b, Tensor::from_parts(vec![k, n], gb)),
            ]
        }
        Op::Conv2d { input, kernel, dims } => {
            let (gi, gk) = kernels::conv2d_backward(dims, val(input).data(), val(kernel).data(), g.data());
            vec![
                (*input, Tensor::from_parts(val(input).shape().to_vec(), gi)),
                (*kernel, Tensor::from_parts(val(kernel).shape().to_vec(), gk)),
            ]
        }
        Op::Conv3d { input, kernel, dims } => {
            let (gi, gk) = kernels::conv3d_backward(dims, val(input).data(), val(kernel).data(), g.data());
            vec![
                (*input, Tensor::from_parts(val(input).shape().to_vec(), gi)),
                (*kernel, Tensor::from_parts(val(kernel).shape().to_vec(), gk)),
            ]
        }
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let ps = val(p).shape();
                    let n = ps[*axis];
                    let mut data = Vec::with_capacity(val(p).numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    offset += n;
                    (*p, Tensor::from_parts(ps.to_vec(), data))
                })
                .collect()
        }
        Op::Slice { src, axis, start } => {
            let ss = val(src).shape();
            let (outer, n, inner) = split_axis(ss, *axis);
            let len = node.value.shape()[*axis];
            let mut data = vec![0.0; val(src).numel()];
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                data[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*src, Tensor::from_parts(ss.to_vec(), data))]
        }
        Op::Reshape(src) => vec![(*src, Tensor::from_parts(val(src).shape().to_vec(), g.data().to_vec()))],
        Op::Softmax { src, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis(node.value.shape(), *axis);
            let mut gi = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g.data()[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        gi[at(k)] = y[at(k)] * (g.data()[at(k)] - dot);
                    }
                }
            }
            vec![(*src, Tensor::from_parts(node.value.shape().to_vec(), gi))]
        }
        Op::SumAxis { src, axis } | Op::MeanAxis { src, axis } => {
            let ss = val(src).shape();
            let (outer, n, inner) = split_axis(ss, *axis);
            let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                1.0 / n as f64
            } else {
                1.0
            };
            let mut data = vec![0.0; val(src).numel()];
            for o in 0..outer {
                for k in 0..n {
                    let dst = &mut data[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (d, &gv) in dst.iter_mut().zip(&g.data()[o * inner..(o + 1) * inner]) {
                        *d = gv * scale;
                    }
                }
            }
            vec![(*src, Tensor::from_parts(ss.to_vec(), data))]
        }
        Op::GatherBilinear { feat, coords, mask } => {
            let (vf, vc) = (val(feat), val(coords));
            let sf = vf.shape();
            let (gf, gc) = kernels::gather_backward(
                vf.data(),
                sf[0],
                sf[1],
                sf[2],
                vc.data(),
                mask.as_deref().map(|m| m.data()),
                g.data(),
            );
            vec![
                (*feat, Tensor::from_parts(sf.to_vec(), gf)),
                (*coords, Tensor::from_parts(vc.shape().to_vec(), gc)),
            ]
        }
        Op::Variance {
            reference,
            volumes,
            masks,
        } => {
            let vr = val(reference);
            let s = node.value.shape();
            let vol_data: Vec<&[f64]> = volumes.iter().map(|v| val(v).data()).collect();
            let mask_data: Vec<&[f64]> = masks.iter().map(|m| m.data()).collect();
            let (gr, gv) =
                kernels::variance_backward(vr.data(), &vol_data, &mask_data, s[0], s[1], s[2] * s[3], g.data());
            let mut out = vec![(*reference, Tensor::from_parts(vr.shape().to_vec(), gr))];
            for (v, gd) in volumes.iter().zip(gv) {
                out.push((*v, Tensor::from_parts(s.to_vec(), gd)));
            }
            out
        }
    }
}
