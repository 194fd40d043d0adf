//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! context to push gradients back to its inputs. Nodes are stored in
//! creation order, so walking them backwards is a valid topological order.

use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_err, NnError, Result};
use crate::exec;
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use crate::kernels::PadMode;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride/padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad, mode: PadMode::Zero }
    }

    pub fn with_mode(mut self, mode: PadMode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Affine(f64, f64),
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
    Abs,
    LogClamp(f64),
    Square,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Affine(a, b) => a * x + b,
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Abs => x.abs(),
            Unary::LogClamp(eps) => x.max(eps).ln(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Affine(a, _) => a,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::LogClamp(eps) => {
                if x > eps {
                    1.0 / x
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Precomputed bilinear taps for sampling a `g × g` table at an `h × w` grid.
#[derive(Clone, Debug)]
struct BilinearTaps {
    /// Per output pixel: four (table index, weight) pairs.
    taps: Vec<[(usize, f64); 4]>,
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }
}

enum Op {
    Leaf,
    Unary(Var, Unary),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Softmax(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ChannelUnitNorm {
        x: Var,
        eps: f64,
    },
    ChannelScale {
        x: Var,
        w: Var,
    },
    GridSample {
        table: Var,
        taps: BilinearTaps,
    },
    BroadcastBatch(Var),
    BceWithLogits {
        logits: Var,
        target: Tensor,
        pos_weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of trainable parameters keyed by parameter name.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.named
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An anonymous leaf that receives gradients (e.g. an input image whose
    /// sensitivity is being measured).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Load a named parameter. Trainable parameters report gradients under
    /// their name; frozen ones behave as constants. Repeated loads of the
    /// same name share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Result<Var> {
        let key = format!("{}{}", if trainable { "" } else { "\u{0}frozen:" }, name);
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(key, v);
        Ok(v)
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let src = self.value(x);
        let data = exec::map_slice(src.data(), |v| u.apply(v));
        let t = Tensor::from_vec(src.shape(), data).expect("same size");
        let rg = self.rg(x);
        self.push(t, Op::Unary(x, u), rg)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Unary::Affine(scale, shift))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::LeakyRelu(0.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, Unary::LogClamp(eps))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(kind.name(), ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let t = Tensor::from_vec(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        let op = match kind {
            BinaryKind::Add => Op::Add(a, b),
            BinaryKind::Sub => Op::Sub(a, b),
            BinaryKind::Mul => Op::Mul(a, b),
        };
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// 2-D convolution. `x: [n, c_in, h, w]`, `w: [c_out, c_in, kh, kw]`,
    /// `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (co, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c {
            return Err(shape_err("conv2d", format!("{ci} input channels"), c));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err("conv2d bias", [co], self.shape(b)));
            }
        }
        let geom = ConvGeom { c, h, w: wd, kh, kw, stride: spec.stride, pad: spec.pad, mode: spec.mode };
        if !geom.valid() {
            return Err(shape_err("conv2d", "kernel fitting padded input", (h, wd, kh, kw, spec.pad)));
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let per_in = c * h * wd;
        let plane = oh * ow;
        let outs = exec::map_indexed(n, |i| {
            let mut col = vec![0.0; geom.col_rows() * plane];
            im2col(&xv[i * per_in..(i + 1) * per_in], &geom, &mut col);
            let mut out = vec![0.0; co * plane];
            if let Some(bv) = bv {
                for (oc, chunk) in out.chunks_mut(plane).enumerate() {
                    chunk.fill(bv[oc]);
                }
            }
            gemm(co, geom.col_rows(), plane, wv, false, &col, false, 1.0, &mut out);
            out
        });
        let t = Tensor::from_vec(&[n, co, oh, ow], outs.concat())?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`] with the same
    /// stride/padding). `w: [c_in, c_out, kh, kw]`; output spatial size is
    /// `(h − 1)·stride − 2·pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (ci, co, kh, kw) = self.value(w).dims4()?;
        if ci != c {
            return Err(shape_err("conv_transpose2d", format!("{ci} input channels"), c));
        }
        let oh = ((h - 1) * spec.stride + kh)
            .checked_sub(2 * spec.pad)
            .ok_or_else(|| shape_err("conv_transpose2d", "positive output", (h, spec.pad)))?;
        let ow = ((wd - 1) * spec.stride + kw)
            .checked_sub(2 * spec.pad)
            .ok_or_else(|| shape_err("conv_transpose2d", "positive output", (wd, spec.pad)))?;
        let geom = ConvGeom { c: co, h: oh, w: ow, kh, kw, stride: spec.stride, pad: spec.pad, mode: spec.mode };
        if geom.out_h() != h || geom.out_w() != wd || !geom.valid() {
            return Err(shape_err("conv_transpose2d", (h, wd), (geom.out_h(), geom.out_w())));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let rows = geom.col_rows();
        let plane = h * wd;
        let outs = exec::map_indexed(n, |i| {
            let mut col = vec![0.0; rows * plane];
            gemm(rows, c, plane, wv, true, &xv[i * c * plane..(i + 1) * c * plane], false, 0.0, &mut col);
            let mut out = vec![0.0; co * oh * ow];
            col2im(&col, &geom, &mut out);
            if let Some(bv) = bv {
                for (oc, chunk) in out.chunks_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[oc]);
                }
            }
            out
        });
        let t = Tensor::from_vec(&[n, co, oh, ow], outs.concat())?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// Batched matrix product of rank-3 tensors: `op(a)[b] · op(b)[b]`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("matmul", "two rank-3 tensors with equal batch", (&sa, &sb)));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err("matmul inner", k, k2));
        }
        let batch = sa[0];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let outs = exec::map_indexed(batch, |i| {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &av[i * m * k..(i + 1) * m * k], ta, &bv[i * k * n..(i + 1) * k * n], tb, 0.0, &mut c);
            c
        });
        let t = Tensor::from_vec(&[batch, m, n], outs.concat())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let last = *src.shape().last().expect("non-scalar");
        let mut data = src.data().to_vec();
        exec::for_each_chunk_mut(&mut data, last, |_, row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        });
        let t = Tensor::from_vec(src.shape(), data).expect("same size");
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err("concat_channels", "non-empty", 0))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err("concat_channels", (n, h, w), (vn, vh, vw)));
            }
            total_c += vc;
        }
        let mut data = Vec::with_capacity(n * total_c * h * w);
        for i in 0..n {
            for &v in xs {
                let t = self.value(v);
                let per = t.shape()[1] * h * w;
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let t = Tensor::from_vec(&[n, total_c, h, w], data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(t, Op::Concat(xs.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c {
            return Err(shape_err("slice_channels", c, start + len));
        }
        let src = self.value(x).data();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let base = (i * c + start) * hw;
            data.extend_from_slice(&src[base..base + len * hw]);
        }
        let t = Tensor::from_vec(&[n, len, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceChannels { x, start }, rg))
    }

    /// Divide each pixel's channel vector by its Euclidean norm
    /// (`sqrt(Σ_c x² + eps)`).
    pub fn channel_unit_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for i in 0..n {
            for p in 0..hw {
                let mut ss = eps;
                for ch in 0..c {
                    let v = src[(i * c + ch) * hw + p];
                    ss += v * v;
                }
                let inv = 1.0 / ss.sqrt();
                for ch in 0..c {
                    let k = (i * c + ch) * hw + p;
                    data[k] = src[k] * inv;
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::ChannelUnitNorm { x, eps }, rg))
    }

    /// Multiply channel `c` of a rank-4 tensor by `w[c]`.
    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        if self.shape(w) != [c] {
            return Err(shape_err("channel_scale", [c], self.shape(w)));
        }
        let hw = h * wd;
        let wv = self.value(w).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v * wv[(k / hw) % c])
            .collect();
        let t = Tensor::from_vec(&[n, c, h, wd], data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::ChannelScale { x, w }, rg))
    }

    /// Bilinearly sample a `[e, g, g]` table at normalized coordinates
    /// (`-1` → first cell, `+1` → last cell). `xs` gives the column
    /// coordinate per output column, `ys` the row coordinate per output row.
    /// Output is `[1, e, ys.len(), xs.len()]`.
    pub fn grid_sample(&mut self, table: Var, xs: &[f64], ys: &[f64]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 3 || s[1] != s[2] || s[1] < 2 {
            return Err(shape_err("grid_sample", "[e, g, g] with g ≥ 2", &s));
        }
        let (e, g) = (s[0], s[1]);
        let locate = |u: f64| {
            let p = ((u.clamp(-1.0, 1.0) + 1.0) * 0.5) * (g - 1) as f64;
            let i0 = (p.floor() as usize).min(g - 2);
            (i0, p - i0 as f64)
        };
        let mut taps = Vec::with_capacity(xs.len() * ys.len());
        for &y in ys {
            let (r0, fy) = locate(y);
            for &x in xs {
                let (c0, fx) = locate(x);
                taps.push([
                    (r0 * g + c0, (1.0 - fy) * (1.0 - fx)),
                    (r0 * g + c0 + 1, (1.0 - fy) * fx),
                    ((r0 + 1) * g + c0, fy * (1.0 - fx)),
                    ((r0 + 1) * g + c0 + 1, fy * fx),
                ]);
            }
        }
        let tv = self.value(table).data();
        let hw = taps.len();
        let mut data = vec![0.0; e * hw];
        for ch in 0..e {
            let plane = &tv[ch * g * g..(ch + 1) * g * g];
            for (p, tap) in taps.iter().enumerate() {
                data[ch * hw + p] = tap.iter().map(|&(i, wt)| plane[i] * wt).sum();
            }
        }
        let t = Tensor::from_vec(&[1, e, ys.len(), xs.len()], data)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::GridSample { table, taps: BilinearTaps { taps } }, rg))
    }

    /// Repeat a `[1, c, h, w]` tensor `n` times along the batch axis.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let (bn, c, h, w) = self.value(x).dims4()?;
        if bn != 1 {
            return Err(shape_err("broadcast_batch", 1, bn));
        }
        let src = self.value(x).data();
        let data = src.repeat(n);
        let t = Tensor::from_vec(&[n, c, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::BroadcastBatch(x), rg))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`
    /// (soft targets in `[0,1]` allowed). Positive terms are scaled by
    /// `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor, pos_weight: f64) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(shape_err("bce_with_logits", z.shape(), target.shape()));
        }
        let n = z.numel() as f64;
        let loss: f64 = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| pos_weight * t * softplus(-z) + (1.0 - t) * softplus(z))
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, target: target.clone(), pos_weight },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", "scalar loss", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.push_back(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut named = BTreeMap::new();
        for (key, v) in &self.params {
            if key.starts_with('\u{0}') {
                continue;
            }
            if let Some(g) = &grads[v.0] {
                named.insert(key.clone(), g.clone());
            } else {
                named.insert(key.clone(), Tensor::zeros(self.shape(*v)));
            }
        }
        Ok(Gradients { by_node: grads, named })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn push_back(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, u) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * u.derivative(xi, yi))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), data).expect("same"));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = mul_data(g, self.value(*b));
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = mul_data(g, self.value(*a));
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(s, g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g.data()[0] / xv.numel() as f64));
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(g, *x, *w, *b, geom, grads),
            Op::ConvTranspose2d { x, w, b, geom } => self.conv_t_backward(g, *x, *w, *b, geom, grads),
            Op::MatMul { a, b, ta, tb } => self.matmul_backward(g, *a, *b, *ta, *tb, grads),
            Op::Softmax(x) => {
                let y = &node.value;
                let last = *y.shape().last().expect("non-scalar");
                let mut d = vec![0.0; y.numel()];
                for ((dr, yr), gr) in d.chunks_mut(last).zip(y.data().chunks(last)).zip(g.data().chunks(last)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), d).expect("same"));
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(&s).expect("same size"));
            }
            Op::Concat(xs) => {
                let (n, total_c, h, w) = node.value.dims4().expect("rank 4");
                let hw = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for i in 0..n {
                            let base = (i * total_c + offset) * hw;
                            d.extend_from_slice(&g.data()[base..base + c * hw]);
                        }
                        self.accumulate(grads, v, Tensor::from_vec(&[n, c, h, w], d).expect("same"));
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for i in 0..n {
                    let dst = (i * c + start) * hw;
                    let src = i * len * hw;
                    d.data_mut()[dst..dst + len * hw].copy_from_slice(&g.data()[src..src + len * hw]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::ChannelUnitNorm { x, eps } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4().expect("rank 4");
                let hw = h * w;
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for i in 0..n {
                    for p in 0..hw {
                        let mut ss = *eps;
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let k = (i * c + ch) * hw + p;
                            ss += xv.data()[k] * xv.data()[k];
                            dot += g.data()[k] * y[k];
                        }
                        let inv = 1.0 / ss.sqrt();
                        for ch in 0..c {
                            let k = (i * c + ch) * hw + p;
                            d[k] = (g.data()[k] - y[k] * dot) * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), d).expect("same"));
            }
            Op::ChannelScale { x, w } => {
                let xv = self.value(*x);
                let (_, c, h, wd) = xv.dims4().expect("rank 4");
                let hw = h * wd;
                let wv = self.value(*w).data();
                if self.rg(*x) {
                    let d = g.data().iter().enumerate().map(|(k, gi)| gi * wv[(k / hw) % c]).collect();
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), d).expect("same"));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; c];
                    for (k, (gi, xi)) in g.data().iter().zip(xv.data()).enumerate() {
                        dw[(k / hw) % c] += gi * xi;
                    }
                    self.accumulate(grads, *w, Tensor::from_vec(&[c], dw).expect("same"));
                }
            }
            Op::GridSample { table, taps } => {
                let s = self.shape(*table).to_vec();
                let (e, gsz) = (s[0], s[1]);
                let hw = taps.taps.len();
                let mut d = Tensor::zeros(&s);
                for ch in 0..e {
                    let plane = &mut d.data_mut()[ch * gsz * gsz..(ch + 1) * gsz * gsz];
                    for (p, tap) in taps.taps.iter().enumerate() {
                        let gi = g.data()[ch * hw + p];
                        for &(i, wt) in tap {
                            plane[i] += gi * wt;
                        }
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::BroadcastBatch(x) => {
                let s = self.shape(*x).to_vec();
                let per: usize = s.iter().product();
                let mut d = vec![0.0; per];
                for chunk in g.data().chunks(per) {
                    for (o, v) in d.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&s, d).expect("same"));
            }
            Op::BceWithLogits { logits, target, pos_weight } => {
                let z = self.value(*logits);
                let scale = g.data()[0] / z.numel() as f64;
                let d = z
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &t)| scale * (-pos_weight * t * sigmoid(-z) + (1.0 - t) * sigmoid(z)))
                    .collect();
                self.accumulate(grads, *logits, Tensor::from_vec(z.shape(), d).expect("same"));
            }
        }
    }

    fn conv_backward(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, co) = (g.shape()[0], g.shape()[1]);
        let rows = geom.col_rows();
        let plane = geom.col_cols();
        let per_in = geom.c * geom.h * geom.w;
        let (need_x, need_w) = (self.rg(x), self.rg(w));
        let parts = exec::map_indexed(n, |i| {
            let gi = &g.data()[i * co * plane..(i + 1) * co * plane];
            let dw = need_w.then(|| {
                let mut col = vec![0.0; rows * plane];
                im2col(&xv.data()[i * per_in..(i + 1) * per_in], geom, &mut col);
                let mut dw = vec![0.0; co * rows];
                gemm(co, plane, rows, gi, false, &col, true, 0.0, &mut dw);
                dw
            });
            let dx = need_x.then(|| {
                let mut dcol = vec![0.0; rows * plane];
                gemm(rows, co, plane, wv.data(), true, gi, false, 0.0, &mut dcol);
                let mut dx = vec![0.0; per_in];
                col2im(&dcol, geom, &mut dx);
                dx
            });
            (dw, dx)
        });
        if need_x {
            let dx: Vec<f64> = parts.iter().flat_map(|(_, dx)| dx.as_ref().expect("computed").iter().copied()).collect();
            self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx).expect("same"));
        }
        if need_w {
            let mut dw = vec![0.0; wv.numel()];
            for (part, _) in &parts {
                for (o, v) in dw.iter_mut().zip(part.as_ref().expect("computed")) {
                    *o += v;
                }
            }
            self.accumulate(grads, w, Tensor::from_vec(wv.shape(), dw).expect("same"));
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            self.accumulate(grads, b, Tensor::from_vec(&[co], channel_sums(g)).expect("same"));
        }
    }

    fn conv_t_backward(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, ci, h, wd) = xv.dims4().expect("rank 4");
        let co = geom.c;
        let rows = geom.col_rows();
        let plane = h * wd;
        let per_out = co * geom.h * geom.w;
        let (need_x, need_w) = (self.rg(x), self.rg(w));
        let parts = exec::map_indexed(n, |i| {
            let mut dcol = vec![0.0; rows * plane];
            im2col(&g.data()[i * per_out..(i + 1) * per_out], geom, &mut dcol);
            let dx = need_x.then(|| {
                let mut dx = vec![0.0; ci * plane];
                gemm(ci, rows, plane, wv.data(), false, &dcol, false, 0.0, &mut dx);
                dx
            });
            let dw = need_w.then(|| {
                let mut dw = vec![0.0; ci * rows];
                gemm(ci, plane, rows, &xv.data()[i * ci * plane..(i + 1) * ci * plane], false, &dcol, true, 0.0, &mut dw);
                dw
            });
            (dw, dx)
        });
        if need_x {
            let dx: Vec<f64> = parts.iter().flat_map(|(_, dx)| dx.as_ref().expect("computed").iter().copied()).collect();
            self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx).expect("same"));
        }
        if need_w {
            let mut dw = vec![0.0; wv.numel()];
            for (part, _) in &parts {
                for (o, v) in dw.iter_mut().zip(part.as_ref().expect("computed")) {
                    *o += v;
                }
            }
            self.accumulate(grads, w, Tensor::from_vec(wv.shape(), dw).expect("same"));
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            self.accumulate(grads, b, Tensor::from_vec(&[co], channel_sums(g)).expect("same"));
        }
    }

    fn matmul_backward(&self, g: &Tensor, a: Var, b: Var, ta: bool, tb: bool, grads: &mut [Option<Tensor>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, n) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        let k = if ta { av.shape()[1] } else { av.shape()[2] };
        let (sa, sb) = (m * k, k * n);
        if self.rg(a) {
            let parts = exec::map_indexed(batch, |i| {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let bi = &bv.data()[i * sb..(i + 1) * sb];
                let mut d = vec![0.0; sa];
                if ta {
                    // dA (k×m) = op(B) · dCᵀ
                    gemm(k, n, m, bi, tb, gi, true, 0.0, &mut d);
                } else {
                    // dA (m×k) = dC · op(B)ᵀ
                    gemm(m, n, k, gi, false, bi, !tb, 0.0, &mut d);
                }
                d
            });
            self.accumulate(grads, a, Tensor::from_vec(av.shape(), parts.concat()).expect("same"));
        }
        if self.rg(b) {
            let parts = exec::map_indexed(batch, |i| {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let ai = &av.data()[i * sa..(i + 1) * sa];
                let mut d = vec![0.0; sb];
                if tb {
                    // dB (n×k) = dCᵀ · op(A)
                    gemm(n, m, k, gi, true, ai, ta, 0.0, &mut d);
                } else {
                    // dB (k×n) = op(A)ᵀ · dC
                    gemm(k, m, n, ai, !ta, gi, false, 0.0, &mut d);
                }
                d
            });
            self.accumulate(grads, b, Tensor::from_vec(bv.shape(), parts.concat()).expect("same"));
        }
    }
}

fn mul_data(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape(), d).expect("same")
}

fn channel_sums(g: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = g.dims4().expect("rank 4");
    let hw = h * w;
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (i * c + ch) * hw;
            *o += g.data()[base..base + hw].iter().sum::<f64>();
        }
    }
    out
}
