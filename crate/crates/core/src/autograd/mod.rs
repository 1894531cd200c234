//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value computed during a forward pass. Operations
//! append a node and return a [`Var`] handle; node ids are therefore already
//! in topological order and [`Graph::backward`] is a single reverse sweep.
//! A graph is single-threaded; data-parallel training builds one per sample.

mod fd;

pub use fd::{fd_check, numeric_gradient};

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, softmax_in_place, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Softmax(Var),
    Kron(Var, Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Sum(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    /// Visits every (col row, col column, input offset) triple of the im2col
    /// matrix whose tap lands inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (ch * self.h + iy as usize) * self.w + ix as usize;
                            f(row, oy * self.out_w + ox, src);
                        }
                    }
                }
            }
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.node(v).grad.as_ref()
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    // ---- differentiable operations ------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x + row` with `row` added to every row of `x` (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(row))?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Permute(x, axes.to_vec()), rg))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(Error::shape("transpose2d", format!("{:?}", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    pub fn row_vec(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(Error::shape("row_vec", format!("{:?}", self.shape(x))));
        }
        let n = self.value(x).numel();
        self.reshape(x, &[n])
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_axis(axis, start, end)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&values, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).softmax_rows()?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).kron(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Kron(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [n] || b.shape() != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", xv.shape(), g.shape(), b.shape()),
            ));
        }
        let rows = xv.numel() / n;
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let src = &xv.data()[r * n..(r + 1) * n];
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let xh = (src[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape.clone(), out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::from_parts(shape, xhat),
                inv_std,
            },
            rg,
        ))
    }

    /// 2-D convolution of a `C×H×W` image with `O×C×k×k` weights and an
    /// `O` bias; square kernel, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || bs != [ws[0]] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}, stride {stride}"),
            ));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("kernel {k} larger than padded input {xs:?}")));
        }
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let ncols = out_h * out_w;
        let ckk = c * k * k;
        let mut cols = vec![0.0; ckk * ncols];
        let xd = self.value(x).data();
        geom.for_each_tap(|row, col, src| cols[row * ncols + col] = xd[src]);
        let mut out = vec![0.0; o * ncols];
        for (oc, chunk) in out.chunks_exact_mut(ncols).enumerate() {
            chunk.fill(self.value(bias).data()[oc]);
        }
        gemm(self.value(weight).data(), &cols, &mut out, o, ckk, ncols);
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![o, out_h, out_w], out),
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Max pooling over a `C×H×W` input; padded positions never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || kernel == 0 || stride == 0 || pad >= kernel {
            return Err(Error::shape("max_pool2d", format!("input {xs:?}, kernel {kernel}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::shape("max_pool2d", format!("kernel {kernel} larger than input {xs:?}")));
        }
        let out_h = (h + 2 * pad - kernel) / stride + 1;
        let out_w = (w + 2 * pad - kernel) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        let mut argmax = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let at = (ch * h + iy as usize) * w + ix as usize;
                            if xd[at] > best || best_at == usize::MAX {
                                best = xd[at];
                                best_at = at;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![c, out_h, out_w], out),
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.numel();
        if target >= n {
            return Err(Error::Invalid(format!("target {target} out of range for {n} classes")));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let mut probs = lv.data().to_vec();
        softmax_in_place(&mut probs);
        let max = lv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[target];
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Accumulates d(loss)/d(v) into every reachable node that requires a
    /// gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward called twice without reset".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let seed = Tensor::full(self.shape(loss), 1.0);
        self.nodes[loss.0].grad = Some(seed);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(id, &g)?;
            self.nodes[id].grad = Some(g);
            for (parent, pg) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let want = |v: &Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let batched = av.rank() == 3;
                let (batch, m, k, n) = if batched {
                    (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2])
                } else {
                    (1, av.shape()[0], av.shape()[1], bv.shape()[1])
                };
                if want(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm_nt(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
                if want(b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        gemm_tn(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    out.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                if want(b) {
                    out.push((*b, g.scale(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((*a, g.mul(self.value(*b))?));
                }
                if want(b) {
                    out.push((*b, g.mul(self.value(*a))?));
                }
            }
            Op::AddRow(x, row) => {
                out.push((*x, g.clone()));
                if want(row) {
                    let n = self.value(*row).numel();
                    let mut acc = vec![0.0; n];
                    for chunk in g.data().chunks_exact(n) {
                        for (a, v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    out.push((*row, Tensor::from_parts(vec![n], acc)));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.scale(*c))),
            Op::Reshape(x) => out.push((*x, g.reshape(self.shape(*x))?)),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                out.push((*x, g.permute(&inverse)?));
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let (extent, len) = (xs[*axis], g.shape()[*axis]);
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                out.push((*x, Tensor::from_parts(xs.to_vec(), dx)));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if want(p) {
                        out.push((*p, g.slice_axis(*axis, start, start + len)?));
                    }
                    start += len;
                }
            }
            Op::Softmax(x) => {
                let s = &node.value;
                let n = *s.shape().last().expect("softmax rank >= 1");
                let mut dx = vec![0.0; s.numel()];
                for ((d, sr), gr) in dx.chunks_exact_mut(n).zip(s.data().chunks_exact(n)).zip(g.data().chunks_exact(n)) {
                    let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[j] = sr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, Tensor::from_parts(s.shape().to_vec(), dx)));
            }
            Op::Kron(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q) = (av.shape()[0], av.shape()[1]);
                let (r, s) = (bv.shape()[0], bv.shape()[1]);
                let cols = q * s;
                let mut da = vec![0.0; p * q];
                let mut db = vec![0.0; r * s];
                for i in 0..p {
                    for j in 0..q {
                        let aij = av.data()[i * q + j];
                        let mut acc = 0.0;
                        for k in 0..r {
                            let gbase = (i * r + k) * cols + j * s;
                            for l in 0..s {
                                let gv = g.data()[gbase + l];
                                acc += gv * bv.data()[k * s + l];
                                db[k * s + l] += gv * aij;
                            }
                        }
                        da[i * q + j] = acc;
                    }
                }
                if want(a) {
                    out.push((*a, Tensor::from_parts(vec![p, q], da)));
                }
                if want(b) {
                    out.push((*b, Tensor::from_parts(vec![r, s], db)));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                out.push((*x, g.zip_map(xv, "relu_backward", |gv, v| if v > 0.0 { gv } else { 0.0 })?));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                out.push((
                    *x,
                    g.zip_map(xv, "gelu_backward", |gv, v| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })?,
                ));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; g.numel()];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let xr = &xhat.data()[r * n..(r + 1) * n];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let d = gr[j] * gam[j];
                        sum_d += d;
                        sum_dx += d * xr[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let d = gr[j] * gam[j];
                        dx[r * n + j] = is / nf * (nf * d - sum_d - xr[j] * sum_dx);
                    }
                }
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), dx)));
                if want(gamma) {
                    out.push((*gamma, Tensor::from_parts(vec![n], dgamma)));
                }
                if want(beta) {
                    out.push((*beta, Tensor::from_parts(vec![n], dbeta)));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let ncols = geom.out_h * geom.out_w;
                let ckk = geom.c * geom.k * geom.k;
                let o = self.shape(*w)[0];
                if want(w) {
                    let mut dw = vec![0.0; o * ckk];
                    gemm_nt(g.data(), cols, &mut dw, o, ncols, ckk);
                    out.push((*w, Tensor::from_parts(self.shape(*w).to_vec(), dw)));
                }
                if want(b) {
                    let db = g.data().chunks_exact(ncols).map(|c| c.iter().sum()).collect();
                    out.push((*b, Tensor::from_parts(vec![o], db)));
                }
                if want(x) {
                    let mut dcols = vec![0.0; ckk * ncols];
                    gemm_tn(self.value(*w).data(), g.data(), &mut dcols, ckk, o, ncols);
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    geom.for_each_tap(|row, col, src| dx[src] += dcols[row * ncols + col]);
                    out.push((*x, Tensor::from_parts(self.shape(*x).to_vec(), dx)));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&at, gv) in argmax.iter().zip(g.data()) {
                    dx[at] += gv;
                }
                out.push((*x, Tensor::from_parts(self.shape(*x).to_vec(), dx)));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                out.push((*x, Tensor::full(self.shape(*x), gv)));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let gv = g.data()[0];
                let mut d: Vec<f64> = probs.iter().map(|p| p * gv).collect();
                d[*target] -= gv;
                out.push((*logits, Tensor::from_parts(self.shape(*logits).to_vec(), d)));
            }
        }
        Ok(out)
    }
}
