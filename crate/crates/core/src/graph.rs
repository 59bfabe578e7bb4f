//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants or trainable inputs; gradients are only propagated through nodes
//! that (transitively) depend on a trainable leaf, so frozen sub-networks cost
//! nothing on the backward pass and receive no gradient.

use crate::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a square-kernel 2-D convolution. `pad_lo` pads top/left,
/// `pad_hi` pads bottom/right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize) -> usize {
        let padded = input + self.pad_lo + self.pad_hi;
        if padded < self.kernel {
            0
        } else {
            (padded - self.kernel) / self.stride + 1
        }
    }
}

/// One crop: source batch row and top-left offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub src: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    MatMul(Var, Var),
    AddRowVec(Var, Var),
    AddChannelBias(Var, Var),
    AddChannelRows(Var, Var),
    Silu(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Upsample2x(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MeanSpatial(Var),
    Concat1(Var, Var),
    Crop { x: Var, crops: Vec<Crop>, h: usize, w: usize },
    Embedding { table: Var, idx: Vec<usize> },
    RowSum(Var),
    Reshape(Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Spatial extent (product of dims past the channel axis) of a `[B, C, ...]` shape.
fn spatial(shape: &[usize]) -> usize {
    shape.iter().skip(2).product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient on [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// Multiplies row `i` (leading dimension) by `coeffs[i]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), coeffs.len(), "scale_rows length mismatch");
        let n = va.row_len();
        let mut data = va.data().to_vec();
        for (row, c) in data.chunks_mut(n.max(1)).zip(&coeffs) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push(t, Op::ScaleRows(a, coeffs), ng)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k) = (va.shape()[0], va.shape()[1]);
        let m = vb.shape()[1];
        assert_eq!(vb.shape()[0], k, "matmul inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, va.data(), false, vb.data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), ng)
    }

    /// `[n, m] + [m]`, broadcasting over rows.
    pub fn add_row_vec(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let m = vb.numel();
        assert_eq!(va.row_len(), m, "add_row_vec width mismatch");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(vb.data()).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::AddRowVec(a, b), ng)
    }

    /// `[B, C, ...] + [C]`.
    pub fn add_channel_bias(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.shape()[1];
        assert_eq!(vb.numel(), c, "channel bias mismatch");
        let s = spatial(va.shape());
        let mut data = va.data().to_vec();
        for (i, chunk) in data.chunks_mut(s).enumerate() {
            let bias = vb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::AddChannelBias(a, b), ng)
    }

    /// `[B, C, ...] + [B, C]`, broadcasting each per-sample channel vector over space.
    pub fn add_channel_rows(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.shape(), &va.shape()[..2], "channel rows mismatch");
        let s = spatial(va.shape());
        let mut data = va.data().to_vec();
        for (i, chunk) in data.chunks_mut(s).enumerate() {
            let bias = vb.data()[i];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::AddChannelRows(a, b), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    /// `x: [B, C, H, W]`, `w: [O, C, k, k]` -> `[B, O, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let &[b, c, h, wd] = vx.shape() else { panic!("conv2d input must be 4-D") };
        let &[o, wc, kh, kw] = vw.shape() else { panic!("conv2d weight must be 4-D") };
        assert!(wc == c && kh == geom.kernel && kw == geom.kernel, "conv2d weight mismatch");
        let (ho, wo) = (geom.out_size(h), geom.out_size(wd));
        assert!(ho > 0 && wo > 0, "conv2d output would be empty");
        let ck = c * kh * kw;
        let p = ho * wo;
        let mut cols = vec![0.0; ck * p];
        let mut out = vec![0.0; b * o * p];
        for bi in 0..b {
            im2col(&vx.data()[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, geom, ho, wo, &mut cols);
            gemm(o, ck, p, vw.data(), false, &cols, false, &mut out[bi * o * p..(bi + 1) * o * p], 0.0);
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::from_parts(vec![b, o, ho, wo], out), Op::Conv2d { x, w, geom }, ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let &[b, c, h, w] = vx.shape() else { panic!("upsample2x input must be 4-D") };
        let mut out = vec![0.0; b * c * 4 * h * w];
        for plane in 0..b * c {
            let src = &vx.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![b, c, 2 * h, 2 * w], out), Op::Upsample2x(x), ng)
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let (b, c) = (vx.shape()[0], vx.shape()[1]);
        assert!(groups > 0 && c % groups == 0, "channels {c} not divisible into {groups} groups");
        let s = spatial(vx.shape());
        let gsize = (c / groups) * s;
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; b * groups];
        for (gi, (src, dst)) in vx.data().chunks(gsize).zip(xhat.chunks_mut(gsize)).enumerate() {
            let mean = src.iter().sum::<f64>() / gsize as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[gi] = is;
            dst.iter_mut().zip(src).for_each(|(d, v)| *d = (v - mean) * is);
        }
        let (vg, vb) = (self.value(gamma), self.value(beta));
        assert!(vg.numel() == c && vb.numel() == c, "group_norm affine mismatch");
        let mut out = xhat.clone();
        for (i, chunk) in out.chunks_mut(s).enumerate() {
            let ch = i % c;
            let (g, bb) = (vg.data()[ch], vb.data()[ch]);
            chunk.iter_mut().for_each(|v| *v = *v * g + bb);
        }
        let t = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std }, ng)
    }

    /// `[B, C, ...] -> [B, C]`, averaging over the spatial axes.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c) = (vx.shape()[0], vx.shape()[1]);
        let s = spatial(vx.shape());
        let out = vx.data().chunks(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![b, c], out), Op::MeanSpatial(x), ng)
    }

    /// Concatenates `[B, Ca, ...]` and `[B, Cb, ...]` along axis 1.
    pub fn concat1(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape()[0], vb.shape()[0], "concat batch mismatch");
        assert_eq!(va.shape()[2..], vb.shape()[2..], "concat trailing mismatch");
        let (ra, rb) = (va.row_len(), vb.row_len());
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for i in 0..va.rows() {
            out.extend_from_slice(&va.data()[i * ra..(i + 1) * ra]);
            out.extend_from_slice(&vb.data()[i * rb..(i + 1) * rb]);
        }
        let mut shape = va.shape().to_vec();
        shape[1] += vb.shape()[1];
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(shape, out), Op::Concat1(a, b), ng)
    }

    /// Extracts `h x w` windows from `[B, C, H, W]`, one output row per crop.
    pub fn crop(&mut self, x: Var, crops: Vec<Crop>, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let &[b, c, hh, ww] = vx.shape() else { panic!("crop input must be 4-D") };
        let mut out = Vec::with_capacity(crops.len() * c * h * w);
        for cr in &crops {
            assert!(cr.src < b && cr.y + h <= hh && cr.x + w <= ww, "crop out of bounds");
            for ch in 0..c {
                let plane = &vx.data()[(cr.src * c + ch) * hh * ww..];
                for y in 0..h {
                    let start = (cr.y + y) * ww + cr.x;
                    out.extend_from_slice(&plane[start..start + w]);
                }
            }
        }
        let t = Tensor::from_parts(vec![crops.len(), c, h, w], out);
        let ng = self.ng(x);
        self.push(t, Op::Crop { x, crops, h, w }, ng)
    }

    /// Row lookup `table[idx[i]]`: `[K, D] -> [len(idx), D]`.
    pub fn embedding(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let vt = self.value(table);
        let k = vt.rows();
        assert!(idx.iter().all(|&i| i < k), "embedding index out of range");
        let t = vt.select_rows(&idx);
        let ng = self.ng(table);
        self.push(t, Op::Embedding { table, idx }, ng)
    }

    /// `[B, ...] -> [B]`, summing each row.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.row_len();
        let out: Vec<f64> = vx.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![vx.rows()], out), Op::RowSum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape element count");
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) && self.ng(*b) {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g);
                } else if self.ng(*a) {
                    self.accumulate(grads, *a, g);
                } else {
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = g.data().iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::ScaleRows(a, coeffs) => {
                let n = g.row_len().max(1);
                let mut g = g;
                for (row, c) in g.data_mut().chunks_mut(n).zip(coeffs) {
                    row.iter_mut().for_each(|v| *v *= c);
                }
                self.accumulate(grads, *a, g);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.ng(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), false, vb.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![n, k], da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, va.data(), true, g.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, m], db));
                }
            }
            Op::AddRowVec(a, b) => {
                if self.ng(*b) {
                    let m = self.value(*b).numel();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(self.value(*b).shape().to_vec(), db));
                }
                self.accumulate(grads, *a, g);
            }
            Op::AddChannelBias(a, b) => {
                if self.ng(*b) {
                    let c = self.value(*b).numel();
                    let s = spatial(g.shape());
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.data().chunks(s).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(self.value(*b).shape().to_vec(), db));
                }
                self.accumulate(grads, *a, g);
            }
            Op::AddChannelRows(a, b) => {
                if self.ng(*b) {
                    let s = spatial(g.shape());
                    let db = g.data().chunks(s).map(|ch| ch.iter().sum::<f64>()).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(self.value(*b).shape().to_vec(), db));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Silu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Conv2d { x, w, geom } => self.conv2d_backward(*x, *w, *geom, out, &g, grads),
            Op::Upsample2x(x) => {
                let &[b, c, h, w] = self.value(*x).shape() else { unreachable!() };
                let mut dx = vec![0.0; b * c * h * w];
                for plane in 0..b * c {
                    let src = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![b, c, h, w], dx));
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let shape = self.value(*x).shape().to_vec();
                let c = shape[1];
                let s = spatial(&shape);
                let vg = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (i, (gc, xc)) in g.data().chunks(s).zip(xhat.chunks(s)).enumerate() {
                        let ch = i % c;
                        dgamma[ch] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                        dbeta[ch] += gc.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], dgamma));
                    self.accumulate(grads, *beta, Tensor::from_parts(vec![c], dbeta));
                }
                if self.ng(*x) {
                    let gsize = (c / groups) * s;
                    let mut dxhat = g.data().to_vec();
                    for (i, chunk) in dxhat.chunks_mut(s).enumerate() {
                        let gm = vg[i % c];
                        chunk.iter_mut().for_each(|v| *v *= gm);
                    }
                    let mut dx = vec![0.0; dxhat.len()];
                    let n = gsize as f64;
                    for (gi, ((dxh, xh), dst)) in dxhat
                        .chunks(gsize)
                        .zip(xhat.chunks(gsize))
                        .zip(dx.chunks_mut(gsize))
                        .enumerate()
                    {
                        let sum_d: f64 = dxh.iter().sum();
                        let sum_dx: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let is = inv_std[gi];
                        for ((d, &dv), &xv) in dst.iter_mut().zip(dxh).zip(xh) {
                            *d = is / n * (n * dv - sum_d - xv * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
                }
            }
            Op::MeanSpatial(x) => {
                let shape = self.value(*x).shape().to_vec();
                let s = spatial(&shape);
                let mut dx = Vec::with_capacity(s * g.numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / s as f64, s));
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::Concat1(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (ra, rb) = (self.value(*a).row_len(), self.value(*b).row_len());
                let rows = sa[0];
                let mut da = Vec::with_capacity(rows * ra);
                let mut db = Vec::with_capacity(rows * rb);
                for i in 0..rows {
                    let row = &g.data()[i * (ra + rb)..(i + 1) * (ra + rb)];
                    da.extend_from_slice(&row[..ra]);
                    db.extend_from_slice(&row[ra..]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(sa, da));
                self.accumulate(grads, *b, Tensor::from_parts(sb, db));
            }
            Op::Crop { x, crops, h, w } => {
                let shape = self.value(*x).shape().to_vec();
                let (c, hh, ww) = (shape[1], shape[2], shape[3]);
                let mut dx = vec![0.0; shape.iter().product()];
                let mut src = g.data().iter();
                for cr in crops {
                    for ch in 0..c {
                        let base = (cr.src * c + ch) * hh * ww;
                        for y in 0..*h {
                            let start = base + (cr.y + y) * ww + cr.x;
                            for d in &mut dx[start..start + w] {
                                *d += src.next().expect("crop grad length");
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::Embedding { table, idx } => {
                let shape = self.value(*table).shape().to_vec();
                let d = self.value(*table).row_len();
                let mut dt = vec![0.0; shape.iter().product()];
                for (row, &i) in g.data().chunks(d).zip(idx) {
                    dt[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *table, Tensor::from_parts(shape, dt));
            }
            Op::RowSum(x) => {
                let shape = self.value(*x).shape().to_vec();
                let n = self.value(*x).row_len();
                let mut dx = Vec::with_capacity(n * g.numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv, n));
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape).expect("reshape grad"));
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, geom: ConvGeom, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (vx, vw) = (self.value(x), self.value(w));
        let &[b, c, h, wd] = vx.shape() else { unreachable!() };
        let &[o, _, kh, kw] = vw.shape() else { unreachable!() };
        let (ho, wo) = (out.shape()[2], out.shape()[3]);
        let ck = c * kh * kw;
        let p = ho * wo;
        let mut cols = vec![0.0; ck * p];
        let mut dw = if self.ng(w) { Some(vec![0.0; vw.numel()]) } else { None };
        let mut dx = if self.ng(x) { Some(vec![0.0; vx.numel()]) } else { None };
        let mut dcols = vec![0.0; ck * p];
        for bi in 0..b {
            let gy = &g.data()[bi * o * p..(bi + 1) * o * p];
            if let Some(dw) = dw.as_mut() {
                im2col(&vx.data()[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, geom, ho, wo, &mut cols);
                gemm(o, p, ck, gy, false, &cols, true, dw, 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(ck, o, p, vw.data(), true, gy, false, &mut dcols, 0.0);
                col2im(&dcols, c, h, wd, geom, ho, wo, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
            }
        }
        if let Some(dw) = dw {
            self.accumulate(grads, w, Tensor::from_parts(vw.shape().to_vec(), dw));
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, Tensor::from_parts(vx.shape().to_vec(), dx));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, geom: ConvGeom, ho: usize, wo: usize, cols: &mut [f64]) {
    let k = geom.kernel;
    let p = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad_lo as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad_lo as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, geom: ConvGeom, ho: usize, wo: usize, dx: &mut [f64]) {
    let k = geom.kernel;
    let p = ho * wo;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad_lo as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad_lo as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
