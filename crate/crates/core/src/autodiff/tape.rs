//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends one record to the [`Tape`]; a record only
//! references earlier records, so the tape is topologically ordered by
//! construction. [`Tape::backward`] walks it once in reverse and leaves a
//! gradient on every leaf created with `requires_grad = true`.
//!
//! Records whose inputs do not require gradients are still stored (their
//! values are needed downstream) but are skipped during the backward sweep.
//! Attacks exploit this: network parameters enter as constants, so only the
//! input-gradient path is differentiated.

use std::sync::Arc;

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        kernels: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
        cols: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Exp(Var),
    Log { x: Var, eps: f64 },
    Square(Var),
    Powi(Var, i32),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Max { x: Var, at: usize },
    AvgPool2d { x: Var, kh: usize, kw: usize },
    LogSumExp { x: Var, row: usize },
    Softmax { x: Var, row: usize },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::AddScalar(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Powi(a, _)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Log { x, .. }
            | Op::Max { x, .. }
            | Op::AvgPool2d { x, .. }
            | Op::LogSumExp { x, .. }
            | Op::Softmax { x, .. } => vec![*x],
            Op::Conv2d {
                x, kernels, bias, ..
            } => {
                let mut v = vec![*x, *kernels];
                v.extend(bias);
                v
            }
            Op::InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations supporting one reverse sweep at a time.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every record so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inputs of the record that produced `v`, for topology checks.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Records a leaf without copying an already shared buffer.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.nodes[a.0].value).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Cross-correlation of `x[C_in×H×W]` with `kernels[C_out×C_in×kh×kw]`,
    /// plus an optional per-output-channel `bias[C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernels).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return Err(Error::Shape(format!("conv2d input {sx:?} kernels {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if sk[2] > sx[1] + 2 * padding || sk[3] > sx[2] + 2 * padding {
            return Err(Error::Shape(format!(
                "kernel {}x{} larger than padded input {}x{} (padding {padding})",
                sk[2], sk[3], sx[1], sx[2]
            )));
        }
        let geo = ConvGeometry {
            in_channels: sx[0],
            height: sx[1],
            width: sx[2],
            kernel_h: sk[2],
            kernel_w: sk[3],
            stride,
            padding,
        };
        let c_out = sk[0];
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::Shape(format!(
                    "conv2d bias {:?}, expected [{c_out}]",
                    self.shape(b)
                )));
            }
        }
        let cols = im2col(self.data(x), &geo);
        let p = geo.out_h() * geo.out_w();
        let mut out = vec![0.0; c_out * p];
        gemm_nn(self.data(kernels), &cols, &mut out, c_out, geo.patch_len(), p);
        if let Some(b) = bias {
            let bd = self.data(b);
            for (co, chunk) in out.chunks_mut(p).enumerate() {
                for v in chunk {
                    *v += bd[co];
                }
            }
        }
        let value = Tensor::new(vec![c_out, geo.out_h(), geo.out_w()], out)?;
        // The patch matrix is only needed to differentiate the kernels.
        let cols = if self.nodes[kernels.0].requires_grad {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernels,
                bias,
                geo,
                cols,
            },
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        if tb.len() == 1 {
            let s = tb.data()[0];
            return Ok(ta.map(|v| f(v, s)));
        }
        if ta.len() == 1 {
            let s = ta.data()[0];
            return Ok(tb.map(|v| f(s, v)));
        }
        Err(Error::Shape(format!(
            "{name}: {:?} vs {:?} (only identical shapes or a scalar operand broadcast)",
            ta.shape(),
            tb.shape()
        )))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Natural log; fails on non-positive entries.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Log { x: a, eps: 0.0 }))
    }

    /// `log(a + eps)`, the stabilized variant.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&v| v + eps <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log({bad} + {eps}) is undefined")));
        }
        let v = self.value(a).map(|x| (x + eps).ln());
        Ok(self.push(v, Op::Log { x: a, eps }))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn powi(&mut self, a: Var, p: i32) -> Result<Var> {
        if p < 1 {
            return Err(Error::InvalidArgument(format!("powi exponent {p} < 1")));
        }
        let v = self.value(a).map(|x| x.powi(p));
        Ok(self.push(v, Op::Powi(a, p)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Global maximum; the gradient flows to the first maximal entry.
    pub fn max(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let at = t.argmax();
        let v = Tensor::scalar(t.data()[at]);
        self.push(v, Op::Max { x: a, at })
    }

    /// Non-overlapping average pooling of `x[C×H×W]` with window `kh×kw`;
    /// trailing rows/columns that do not fill a window are dropped.
    pub fn avgpool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("avgpool2d needs C×H×W, got {s:?}")));
        }
        if kh == 0 || kw == 0 || kh > s[1] || kw > s[2] {
            return Err(Error::Shape(format!(
                "avgpool2d window {kh}x{kw} does not fit {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / kh, w / kw);
        let src = self.data(x);
        let norm = 1.0 / (kh * kw) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..kh {
                        let row = (ch * h + oy * kh + dy) * w + ox * kw;
                        for v in &src[row..row + kw] {
                            acc += v;
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2d { x, kh, kw }))
    }

    fn row_len(&self, x: Var, name: &str) -> Result<usize> {
        let s = self.shape(x);
        match s.last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(Error::Shape(format!("{name}: empty reduction axis in {s:?}"))),
        }
    }

    /// Max-shifted log-sum-exp over the last axis.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let n = self.row_len(x, "logsumexp")?;
        let s = self.shape(x).to_vec();
        let out: Vec<f64> = self.data(x).chunks(n).map(logsumexp_slice).collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LogSumExp { x, row: n }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.row_len(x, "softmax")?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(n) {
            out.extend(softmax_slice(row));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, row: n }))
    }

    /// Per-channel normalization of `x[C×H×W]` followed by a per-channel
    /// affine map `gamma[C]`, `beta[C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(gamma) != [s[0]] || self.shape(beta) != [s[0]] {
            return Err(Error::Shape(format!(
                "instance_norm x {s:?} gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let (src, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; c * hw];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in 0..hw {
                let xh = (plane[i] - mean) * is;
                xhat[ch * hw + i] = xh;
                out[ch * hw + i] = g[ch] * xh + b[ch];
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Flattens and concatenates several values into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let value = Tensor::from_vec(out);
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`. Any previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(shape, data).expect("gradient matches value shape"))
            })
            .collect();
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    /// Elementwise-or-broadcast accumulation for binary ops.
    fn accumulate_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl Fn(usize) -> f64, n_out: usize) {
        let len = self.nodes[v.0].value.len();
        self.accumulate(grads, v, |slot| {
            if len == n_out {
                for (i, s) in slot.iter_mut().enumerate() {
                    *s += contrib(i);
                }
            } else {
                slot[0] += (0..n_out).map(&contrib).sum::<f64>();
            }
        });
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |slot| gemm_nt(g, db, slot, m, k, n));
                self.accumulate(grads, *b, |slot| gemm_tn(da, g, slot, m, k, n));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                self.accumulate(grads, *a, |slot| {
                    for i in 0..m {
                        for j in 0..n {
                            slot[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) | Op::AddScalar(a) => {
                self.accumulate(grads, *a, |slot| add_into(slot, g));
            }
            Op::Conv2d {
                x,
                kernels,
                bias,
                geo,
                cols,
            } => {
                let c_out = self.shape(*kernels)[0];
                let p = geo.out_h() * geo.out_w();
                let patch = geo.patch_len();
                if let Some(b) = bias {
                    self.accumulate(grads, *b, |slot| {
                        for (co, chunk) in g.chunks(p).enumerate() {
                            slot[co] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                self.accumulate(grads, *kernels, |slot| gemm_nt(g, cols, slot, c_out, patch, p));
                let dk = self.data(*kernels);
                self.accumulate(grads, *x, |slot| {
                    let mut dcols = vec![0.0; patch * p];
                    gemm_tn(dk, g, &mut dcols, c_out, patch, p);
                    col2im(&dcols, geo, slot);
                });
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, |i| g[i], g.len());
                self.accumulate_broadcast(grads, *b, |i| g[i], g.len());
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, |i| g[i], g.len());
                self.accumulate_broadcast(grads, *b, |i| -g[i], g.len());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                self.accumulate_broadcast(grads, *a, |i| g[i] * at(db, i), g.len());
                self.accumulate_broadcast(grads, *b, |i| g[i] * at(da, i), g.len());
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |slot| {
                    for (s, gv) in slot.iter_mut().zip(g) {
                        *s += gv * c;
                    }
                });
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, |slot| {
                    for ((s, gv), y) in slot.iter_mut().zip(g).zip(out) {
                        *s += gv * y;
                    }
                });
            }
            Op::Log { x, eps } => {
                let dx = self.data(*x);
                self.accumulate(grads, *x, |slot| {
                    for ((s, gv), xv) in slot.iter_mut().zip(g).zip(dx) {
                        *s += gv / (xv + eps);
                    }
                });
            }
            Op::Square(a) => {
                let da = self.data(*a);
                self.accumulate(grads, *a, |slot| {
                    for ((s, gv), xv) in slot.iter_mut().zip(g).zip(da) {
                        *s += 2.0 * xv * gv;
                    }
                });
            }
            Op::Powi(a, p) => {
                let da = self.data(*a);
                let p = *p;
                self.accumulate(grads, *a, |slot| {
                    for ((s, gv), xv) in slot.iter_mut().zip(g).zip(da) {
                        *s += gv * p as f64 * xv.powi(p - 1);
                    }
                });
            }
            Op::Relu(a) => {
                let da = self.data(*a);
                self.accumulate(grads, *a, |slot| {
                    for ((s, gv), xv) in slot.iter_mut().zip(g).zip(da) {
                        if *xv > 0.0 {
                            *s += gv;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |slot| slot.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(a) => {
                self.accumulate(grads, *a, |slot| {
                    let share = g[0] / slot.len() as f64;
                    slot.iter_mut().for_each(|s| *s += share);
                });
            }
            Op::Max { x, at } => {
                self.accumulate(grads, *x, |slot| slot[*at] += g[0]);
            }
            Op::AvgPool2d { x, kh, kw } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / kh, w / kw);
                let norm = 1.0 / (kh * kw) as f64;
                self.accumulate(grads, *x, |slot| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let share = g[(ch * oh + oy) * ow + ox] * norm;
                                for dy in 0..*kh {
                                    let row = (ch * h + oy * kh + dy) * w + ox * kw;
                                    for v in &mut slot[row..row + kw] {
                                        *v += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::LogSumExp { x, row } => {
                let dx = self.data(*x);
                self.accumulate(grads, *x, |slot| {
                    for (r, (chunk, out_chunk)) in dx.chunks(*row).zip(slot.chunks_mut(*row)).enumerate() {
                        for (s, p) in out_chunk.iter_mut().zip(softmax_slice(chunk)) {
                            *s += g[r] * p;
                        }
                    }
                });
            }
            Op::Softmax { x, row } => {
                self.accumulate(grads, *x, |slot| {
                    for ((y, gr), s) in out.chunks(*row).zip(g.chunks(*row)).zip(slot.chunks_mut(*row)) {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..*row {
                            s[i] += y[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (c, hw) = (s[0], s[1] * s[2]);
                let gam = self.data(*gamma);
                self.accumulate(grads, *beta, |slot| {
                    for ch in 0..c {
                        slot[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                });
                self.accumulate(grads, *gamma, |slot| {
                    for ch in 0..c {
                        let r = ch * hw..(ch + 1) * hw;
                        slot[ch] += g[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                self.accumulate(grads, *x, |slot| {
                    let n = hw as f64;
                    for ch in 0..c {
                        let r = ch * hw..(ch + 1) * hw;
                        let gs = &g[r.clone()];
                        let xh = &xhat[r.clone()];
                        let sum_d: f64 = gs.iter().sum::<f64>() * gam[ch];
                        let sum_dx: f64 = gs.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() * gam[ch];
                        for (i, s) in slot[r].iter_mut().enumerate() {
                            let d = gs[i] * gam[ch];
                            *s += inv_std[ch] / n * (n * d - sum_d - xh[i] * sum_dx);
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.accumulate(grads, p, |slot| add_into(slot, &g[offset..offset + len]));
                    offset += len;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn logsumexp_slice(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}
