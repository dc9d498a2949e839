//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] with a seed gradient for the output walks the tape in
//! reverse and returns gradients for every parameter that was used.

use std::collections::HashMap;

use super::tensor::gemm;
use super::{ParamId, ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        // im2col buffer, kept only when a backward pass is possible
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    Add(Var, Var),
    MulMap { x: Var, map: Vec<f64> },
    AvgPool { x: Var, k: usize },
    Resize { x: Var },
    ConcatChannels(Vec<Var>),
    ToTokens(Var),
    FromTokens(Var),
    MatMul { a: Var, b: Var, b_trans: bool },
    AddRowBias { x: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    Scale { x: Var, s: f64 },
    SliceCols { x: Var, lo: usize },
    ConcatCols(Vec<Var>),
    SigmoidChannels { x: Var, lo: usize, hi: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a tape node, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Parameter gradients in the order the parameters were first used.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    trainable: bool,
    macs: u64,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let out = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) {
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis source indices and weights for half-pixel bilinear resampling.
fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Self::with_mode(true)
    }

    /// A forward-only graph; [`Graph::backward`] panics on it.
    pub fn inference() -> Self {
        Self::with_mode(false)
    }

    fn with_mode(trainable: bool) -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), param_order: Vec::new(), trainable, macs: 0 }
    }

    /// Multiply-accumulates performed by convolutions and matrix products so
    /// far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.trainable });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; repeated uses of one parameter share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    /// Parameters used so far, in order of first use.
    pub fn used_params(&self) -> Vec<ParamId> {
        self.param_order.iter().map(|(id, _)| *id).collect()
    }

    /// 2-D convolution of `x: [C,H,W]` with `w: [O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv input must be [C,H,W]");
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv channel mismatch");
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let direct = k == 1 && stride == 1 && pad == 0;
        let cols = if direct { None } else { Some(im2col(self.value(x).data(), c, h, wd, k, stride, pad)) };
        let mut out = vec![0.0; o * ho * wo];
        {
            let cols_ref = cols.as_deref().unwrap_or(self.value(x).data());
            gemm(o, c * k * k, ho * wo, self.value(w).data(), false, cols_ref, false, &mut out, false);
        }
        self.macs += (o * c * k * k * ho * wo) as u64;
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (ch, plane) in out.chunks_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[ch]);
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let keep = if needs && self.trainable && !direct { cols } else { None };
        self.push(
            Tensor::new(vec![o, ho, wo], out),
            Op::Conv2d { x, w, b, stride, pad, cols: keep },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect());
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Multiplies every channel of `x: [C,H,W]` by a constant `H×W` map.
    pub fn mul_map(&mut self, x: Var, map: Vec<f64>) -> Var {
        let v = self.value(x);
        let hw = v.dim(1) * v.dim(2);
        assert_eq!(map.len(), hw, "map size mismatch");
        let mut data = v.data().to_vec();
        for plane in data.chunks_mut(hw) {
            plane.iter_mut().zip(&map).for_each(|(a, m)| *a *= m);
        }
        let out = Tensor::new(v.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(out, Op::MulMap { x, map }, ng)
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        if k == 1 {
            return x;
        }
        let v = self.value(x);
        let (c, h, w) = (v.dim(0), v.dim(1), v.dim(2));
        assert!(h % k == 0 && w % k == 0, "pool size must divide the map");
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * ho * wo];
        let src = v.data();
        for ch in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    out[(ch * ho + y / k) * wo + x_ / k] += src[(ch * h + y) * w + x_] * inv;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![c, ho, wo], out), Op::AvgPool { x, k }, ng)
    }

    /// Bilinear resampling of `[C,H,W]` to `[C,oh,ow]` with half-pixel
    /// centers.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let v = self.value(x);
        let (c, h, w) = (v.dim(0), v.dim(1), v.dim(2));
        if (h, w) == (oh, ow) {
            return x;
        }
        let ay = bilinear_axis(h, oh);
        let ax = bilinear_axis(w, ow);
        let src = v.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in ay.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in ax.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                    dst[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![c, oh, ow], out), Op::Resize { x }, ng)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let (h, w) = (self.shape(xs[0])[1], self.shape(xs[0])[2]);
        let mut data = Vec::new();
        let mut c = 0;
        for &x in xs {
            let s = self.shape(x);
            assert_eq!((s[1], s[2]), (h, w), "concat spatial mismatch");
            c += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::new(vec![c, h, w], data), Op::ConcatChannels(xs.to_vec()), ng)
    }

    /// `[C,H,W]` to row-major tokens `[H·W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (c, hw) = (v.dim(0), v.dim(1) * v.dim(2));
        let src = v.data();
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = src[ch * hw + p];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![hw, c], out), Op::ToTokens(x), ng)
    }

    /// Tokens `[h·w, C]` back to a `[C,h,w]` map.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = self.value(x);
        let (n, c) = (v.dim(0), v.dim(1));
        assert_eq!(n, h * w, "token count does not match grid");
        let src = v.data();
        let mut out = vec![0.0; c * n];
        for p in 0..n {
            for ch in 0..c {
                out[ch * n + p] = src[p * c + ch];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![c, h, w], out), Op::FromTokens(x), ng)
    }

    /// `a · b` (or `a · bᵀ`) for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var, b_trans: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if b_trans { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, kb, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), b_trans, &mut out, false);
        self.macs += (m * k * n) as u64;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, b_trans }, ng)
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x);
        let n = v.dim(1);
        assert_eq!(self.value(b).len(), n, "bias length mismatch");
        let bias = self.value(b).data();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(a, b)| *a += b);
        }
        let out = Tensor::new(v.shape().to_vec(), data);
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddRowBias { x, b }, ng)
    }

    /// `x · w + b` for `x: [N,D]`, `w: [D,E]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w, false);
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => y,
        }
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let v = self.value(x);
        let n = v.dim(1);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; v.len()];
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = Vec::with_capacity(v.dim(0));
        for (r, row) in v.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + bt[j];
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.dim(1);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for a in row.iter_mut() {
                *a = (*a - max).exp();
                sum += *a;
            }
            row.iter_mut().for_each(|a| *a /= sum);
        }
        let out = Tensor::new(v.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * s).collect());
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, s }, ng)
    }

    /// Columns `lo..hi` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let v = self.value(x);
        let (m, n) = (v.dim(0), v.dim(1));
        let width = hi - lo;
        let mut data = Vec::with_capacity(m * width);
        for row in v.data().chunks(n) {
            data.extend_from_slice(&row[lo..hi]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![m, width], data), Op::SliceCols { x, lo }, ng)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let m = self.shape(xs[0])[0];
        let widths: Vec<usize> = xs.iter().map(|&x| self.shape(x)[1]).collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&x, &wd) in xs.iter().zip(&widths) {
            assert_eq!(self.shape(x)[0], m, "concat_cols row mismatch");
            for (r, row) in self.value(x).data().chunks(wd).enumerate() {
                data[r * n + off..r * n + off + wd].copy_from_slice(row);
            }
            off += wd;
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::new(vec![m, n], data), Op::ConcatCols(xs.to_vec()), ng)
    }

    /// Logistic sigmoid on channels `lo..hi` of `[C,H,W]`, identity elsewhere.
    pub fn sigmoid_channels(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let v = self.value(x);
        let hw = v.dim(1) * v.dim(2);
        let mut data = v.data().to_vec();
        for a in &mut data[lo * hw..hi * hw] {
            *a = 1.0 / (1.0 + (-*a).exp());
        }
        let out = Tensor::new(v.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(out, Op::SigmoidChannels { x, lo, hi }, ng)
    }

    /// Back-propagates `seed` (the gradient of a scalar objective with
    /// respect to `output`).
    pub fn backward(&self, output: Var, seed: &[f64]) -> Gradients {
        assert!(self.trainable, "backward on an inference graph");
        assert_eq!(seed.len(), self.value(output).len(), "seed size mismatch");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.to_vec());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads, params: self.param_order.clone() }
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let xs = self.shape(*x);
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (o, k) = (ws[0], ws[2]);
                let (ho, wo) = (node.value.dim(1), node.value.dim(2));
                let cols_ref = cols.as_deref().unwrap_or(self.value(*x).data());
                if self.ng(*w) {
                    let mut gw = vec![0.0; o * c * k * k];
                    gemm(o, ho * wo, c * k * k, gy, false, cols_ref, true, &mut gw, false);
                    add_into(&mut grads[w.0], &gw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let gb: Vec<f64> = gy.chunks(ho * wo).map(|p| p.iter().sum()).collect();
                        add_into(&mut grads[b.0], &gb);
                    }
                }
                if self.ng(*x) {
                    let mut gcols = vec![0.0; c * k * k * ho * wo];
                    gemm(c * k * k, o, ho * wo, self.value(*w).data(), true, gy, false, &mut gcols, false);
                    if cols.is_none() {
                        add_into(&mut grads[x.0], &gcols);
                    } else {
                        let mut gx = vec![0.0; c * h * wd];
                        col2im(&gcols, &mut gx, c, h, wd, k, *stride, *pad);
                        add_into(&mut grads[x.0], &gx);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let g: Vec<f64> = gy.iter().zip(xv).map(|(g, &a)| if a > 0.0 { *g } else { 0.0 }).collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if self.ng(*b) {
                    add_into(&mut grads[b.0], gy);
                }
            }
            Op::MulMap { x, map } => {
                let hw = map.len();
                let mut g = gy.to_vec();
                for plane in g.chunks_mut(hw) {
                    plane.iter_mut().zip(map).for_each(|(a, m)| *a *= m);
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::AvgPool { x, k } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (ho, wo) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x_ in 0..w {
                            g[(ch * h + y) * w + x_] = gy[(ch * ho + y / k) * wo + x_ / k] * inv;
                        }
                    }
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::Resize { x } => {
                let xs = self.shape(*x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (node.value.dim(1), node.value.dim(2));
                let ay = bilinear_axis(h, oh);
                let ax = bilinear_axis(w, ow);
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut g[ch * h * w..(ch + 1) * h * w];
                    let src = &gy[ch * oh * ow..(ch + 1) * oh * ow];
                    for (oy, &(y0, y1, ly)) in ay.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in ax.iter().enumerate() {
                            let d = src[oy * ow + ox];
                            plane[y0 * w + x0] += d * (1.0 - ly) * (1.0 - lx);
                            plane[y0 * w + x1] += d * (1.0 - ly) * lx;
                            plane[y1 * w + x0] += d * ly * (1.0 - lx);
                            plane[y1 * w + x1] += d * ly * lx;
                        }
                    }
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::ConcatChannels(xs) => {
                let mut off = 0;
                for x in xs {
                    let len = self.value(*x).len();
                    if self.ng(*x) {
                        add_into(&mut grads[x.0], &gy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ToTokens(x) => {
                let (hw, c) = (node.value.dim(0), node.value.dim(1));
                let mut g = vec![0.0; c * hw];
                for p in 0..hw {
                    for ch in 0..c {
                        g[ch * hw + p] = gy[p * c + ch];
                    }
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::FromTokens(x) => {
                let (n, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut g = vec![0.0; c * n];
                for p in 0..n {
                    for ch in 0..c {
                        g[p * c + ch] = gy[ch * n + p];
                    }
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::MatMul { a, b, b_trans } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.dim(1);
                if self.ng(*a) {
                    // dA = dY · Bᵀ (or dY · B when B was used transposed)
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gy, false, self.value(*b).data(), !b_trans, &mut ga, false);
                    add_into(&mut grads[a.0], &ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    if *b_trans {
                        // B is n×k: dB = dYᵀ · A
                        gemm(n, m, k, gy, true, self.value(*a).data(), false, &mut gb, false);
                    } else {
                        gemm(k, m, n, self.value(*a).data(), true, gy, false, &mut gb, false);
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::AddRowBias { x, b } => {
                let n = node.value.dim(1);
                if self.ng(*x) {
                    add_into(&mut grads[x.0], gy);
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; n];
                    for row in gy.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = node.value.dim(1);
                let g = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for (row, xr) in gy.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += row[j] * xr[j];
                            gb[j] += row[j];
                        }
                    }
                    add_into(&mut grads[gamma.0], &gg);
                    add_into(&mut grads[beta.0], &gb);
                }
                if self.ng(*x) {
                    let mut gx = vec![0.0; gy.len()];
                    for (r, (row, xr)) in gy.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dxh: Vec<f64> = (0..n).map(|j| row[j] * g[j]).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] = inv_std[r] * (dxh[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.dim(1);
                let y = node.value.data();
                let mut g = vec![0.0; gy.len()];
                for ((gr, yr), out) in gy.chunks(n).zip(y.chunks(n)).zip(g.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::Scale { x, s } => {
                let g: Vec<f64> = gy.iter().map(|a| a * s).collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::SliceCols { x, lo } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let wd = node.value.dim(1);
                let mut g = vec![0.0; m * n];
                for (r, row) in gy.chunks(wd).enumerate() {
                    g[r * n + lo..r * n + lo + wd].copy_from_slice(row);
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::ConcatCols(xs) => {
                let n = node.value.dim(1);
                let mut off = 0;
                for x in xs {
                    let wd = self.shape(*x)[1];
                    if self.ng(*x) {
                        let g: Vec<f64> = gy
                            .chunks(n)
                            .flat_map(|row| row[off..off + wd].iter().copied())
                            .collect();
                        add_into(&mut grads[x.0], &g);
                    }
                    off += wd;
                }
            }
            Op::SigmoidChannels { x, lo, hi } => {
                let hw = node.value.dim(1) * node.value.dim(2);
                let y = node.value.data();
                let mut g = gy.to_vec();
                for i in lo * hw..hi * hw {
                    g[i] *= y[i] * (1.0 - y[i]);
                }
                add_into(&mut grads[x.0], &g);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
