//! Recording-based reverse-mode autodiff over a fixed operator set.
//!
//! A [`Tape`] borrows a [`ParamSet`] read-only, records each forward op with
//! the state its backward pass needs, and replays the records in reverse in
//! [`Tape::backward`]. Parameters of frozen groups are treated as constants:
//! nothing upstream of them is differentiated and they never receive
//! gradients.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nncore::kernels::{self, ConvGeom};
use crate::nncore::{ParamId, ParamSet, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// The operators the tape knows how to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Dense,
    Conv2d,
    DepthwiseConv2d,
    PointwiseConv,
    MaxPool2d,
    GlobalAvgPool,
    Relu,
    Add,
    Softmax,
    SoftmaxCrossEntropy,
    SumSquares,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Dense { x: usize, w: usize, b: usize },
    Conv { kind: OpKind, x: usize, w: usize, b: usize, geom: ConvGeom },
    MaxPool { x: usize, argmax: Vec<u32> },
    GlobalAvgPool { x: usize },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Softmax { x: usize },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f32> },
    SumSquares { x: usize },
}

#[derive(Debug)]
struct Node {
    /// `None` for parameter leaves, whose value lives in the `ParamSet`.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
///
/// Every parameter of a trainable group has an entry (zeros when the loss does
/// not depend on it); parameters of frozen groups have none.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    inputs: HashMap<usize, Tensor>,
    tape: u64,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to an input created by [`Tape::input_with_grad`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.inputs.get(&var.index)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

pub struct Tape<'p> {
    id: u64,
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    fn push(&mut self, value: Option<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autograd("variable was not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor {
        match (&self.nodes[i].value, &self.nodes[i].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(self.val(self.idx(v)?))
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Some(t), Op::Input, false)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(Some(t), Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.params.is_trainable(id);
        self.push(None, Op::Param(id), trainable)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(Error::shape(
                "dense",
                format!("x {xs:?}, w {ws:?}, b {bs:?}; expected x [N, In], w [Out, In], b [Out]"),
            ));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let y = kernels::dense_forward(self.val(xi).data(), self.val(wi).data(), self.val(bi).data(), n, d_in, d_out);
        let needs = self.needs(xi) || self.needs(wi) || self.needs(bi);
        Ok(self.push(Some(Tensor::new(vec![n, d_out], y)?), Op::Dense { x: xi, w: wi, b: bi }, needs))
    }

    fn conv_like(&mut self, kind: OpKind, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let name = match kind {
            OpKind::Conv2d => "conv2d",
            OpKind::DepthwiseConv2d => "depthwise_conv2d",
            _ => "pointwise_conv",
        };
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 || ws[2] != ws[3] {
            return Err(Error::shape(name, format!("x {xs:?}, w {ws:?}, b {bs:?}; expected x [N,C,H,W], w [Co,Ci,K,K], b [Co]")));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        let w_in = if kind == OpKind::DepthwiseConv2d { 1 } else { c_in };
        if ws[1] != w_in || bs[0] != c_out || (kind == OpKind::DepthwiseConv2d && c_out != c_in) {
            return Err(Error::shape(name, format!("input channels {c_in} incompatible with w {ws:?}, b {bs:?}")));
        }
        if kind == OpKind::PointwiseConv && (k != 1 || stride != 1 || pad != 0) {
            return Err(Error::shape(name, format!("pointwise kernel must be 1x1 stride 1, got w {ws:?}")));
        }
        let (Some(ho), Some(wo)) = (kernels::out_extent(h, k, stride, pad), kernels::out_extent(wd, k, stride, pad)) else {
            return Err(Error::shape(name, format!("kernel {k} stride {stride} pad {pad} does not fit input {h}x{wd}")));
        };
        let geom = ConvGeom { n, c_in, h, w: wd, c_out, k, stride, pad, ho, wo };
        let (xv, wv, bv) = (self.val(xi).data(), self.val(wi).data(), self.val(bi).data());
        let y = match kind {
            OpKind::DepthwiseConv2d => kernels::depthwise_forward(xv, wv, bv, &geom),
            _ => kernels::conv2d_forward(xv, wv, bv, &geom),
        };
        let needs = self.needs(xi) || self.needs(wi) || self.needs(bi);
        let out = Tensor::new(vec![n, c_out, ho, wo], y)?;
        Ok(self.push(Some(out), Op::Conv { kind, x: xi, w: wi, b: bi, geom }, needs))
    }

    /// Dense convolution; `w: [Co, Ci, K, K]`, zero padding `pad` on each side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv_like(OpKind::Conv2d, x, w, b, stride, pad)
    }

    /// Per-channel convolution; `w: [C, 1, K, K]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv_like(OpKind::DepthwiseConv2d, x, w, b, stride, pad)
    }

    /// 1x1 channel mixing; `w: [Co, Ci, 1, 1]`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv_like(OpKind::PointwiseConv, x, w, b, 1, 0)
    }

    /// Max pooling over `k x k` windows, no padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.val(xi).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("expected [N,C,H,W], got {xs:?}")));
        }
        let (Some(ho), Some(wo)) = (kernels::out_extent(xs[2], k, stride, 0), kernels::out_extent(xs[3], k, stride, 0)) else {
            return Err(Error::shape("max_pool2d", format!("window {k} stride {stride} does not fit {xs:?}")));
        };
        let (y, argmax) = kernels::max_pool_forward(self.val(xi).data(), xs[0] * xs[1], xs[2], xs[3], k, stride, ho, wo);
        let needs = self.needs(xi);
        let out = Tensor::new(vec![xs[0], xs[1], ho, wo], y)?;
        Ok(self.push(Some(out), Op::MaxPool { x: xi, argmax }, needs))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.val(xi).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected [N,C,H,W], got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let inv = 1.0 / hw as f32;
        let y: Vec<f32> = self.val(xi).data().chunks(hw).map(|p| p.iter().sum::<f32>() * inv).collect();
        let needs = self.needs(xi);
        Ok(self.push(Some(Tensor::new(vec![xs[0], xs[1]], y)?), Op::GlobalAvgPool { x: xi }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.val(xi);
        let y: Vec<f32> = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), y)?;
        let needs = self.needs(xi);
        Ok(self.push(Some(out), Op::Relu { x: xi }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ai), self.val(bi));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let y: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), y)?;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push(Some(out), Op::Add { a: ai, b: bi }, needs))
    }

    /// Row-wise softmax of a `[N, K]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.val(xi).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("softmax", format!("expected [N, K], got {xs:?}")));
        }
        let y = kernels::softmax_rows(self.val(xi).data(), xs[1]);
        let needs = self.needs(xi);
        Ok(self.push(Some(Tensor::new(xs, y)?), Op::Softmax { x: xi }, needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let ls = self.val(li).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {ls:?} vs {} labels", labels.len()),
            ));
        }
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let z = self.val(li).data();
        let mut loss = 0.0f64;
        for (row, &y) in z.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
            loss += (lse - row[y]) as f64;
        }
        let loss = (loss / labels.len() as f64) as f32;
        let probs = kernels::softmax_rows(z, k);
        let needs = self.needs(li);
        let op = Op::SoftmaxCrossEntropy { logits: li, labels: labels.to_vec(), probs };
        Ok(self.push(Some(Tensor::scalar(loss)), op, needs))
    }

    /// `sum(x^2)`.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s: f32 = self.val(xi).data().iter().map(|v| v * v).sum();
        let needs = self.needs(xi);
        Ok(self.push(Some(Tensor::scalar(s)), Op::SumSquares { x: xi }, needs))
    }

    /// Gradients of a scalar `loss` with respect to every trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if !self.val(li).is_scalar() {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(li).shape()
            )));
        }
        self.backward_with_seed(loss, Tensor::filled(self.val(li).shape(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) back.
    pub fn backward_with_seed(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        let oi = self.idx(out)?;
        if matches!(self.nodes[oi].op, Op::Input | Op::Param(_)) {
            return Err(Error::Autograd("backward from a leaf that no recorded op produced".into()));
        }
        if seed.shape() != self.val(oi).shape() {
            return Err(Error::Autograd(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.val(oi).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=oi).map(|_| None).collect();
        grads[oi] = Some(seed);
        let mut param_grads: HashMap<ParamId, Tensor> = HashMap::new();
        let mut input_grads = HashMap::new();

        for i in (0..=oi).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {
                    input_grads.insert(i, g);
                }
                Op::Param(id) => match param_grads.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        param_grads.insert(*id, g);
                    }
                },
                op => self.backward_op(op, &g, &mut grads)?,
            }
        }

        for (id, p) in self.params.iter() {
            if self.params.is_trainable(id) {
                param_grads.entry(id).or_insert_with(|| Tensor::zeros(p.value.shape()));
            }
        }
        Ok(Gradients { params: param_grads, inputs: input_grads, tape: self.id })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], i: usize, shape: &[usize], data: Vec<f32>) -> Result<()> {
        if !self.needs(i) {
            return Ok(());
        }
        let t = Tensor::new(shape.to_vec(), data)?;
        match &mut grads[i] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
        Ok(())
    }

    fn backward_op(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Dense { x, w, b } => {
                let (xt, wt) = (self.val(*x), self.val(*w));
                let (n, d_in, d_out) = (xt.shape()[0], xt.shape()[1], wt.shape()[0]);
                let need_w = self.needs(*w) || self.needs(*b);
                let (dx, dw, db) =
                    kernels::dense_backward(xt.data(), wt.data(), g.data(), n, d_in, d_out, self.needs(*x), need_w);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, xt.shape(), dx)?;
                }
                if let (Some(dw), Some(db)) = (dw, db) {
                    self.accumulate(grads, *w, wt.shape(), dw)?;
                    self.accumulate(grads, *b, &[d_out], db)?;
                }
            }
            Op::Conv { kind, x, w, b, geom } => {
                let (xt, wt) = (self.val(*x), self.val(*w));
                let need_w = self.needs(*w) || self.needs(*b);
                let (dx, dw, db) = match kind {
                    OpKind::DepthwiseConv2d => {
                        kernels::depthwise_backward(xt.data(), wt.data(), g.data(), geom, self.needs(*x), need_w)
                    }
                    _ => kernels::conv2d_backward(xt.data(), wt.data(), g.data(), geom, self.needs(*x), need_w),
                };
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, xt.shape(), dx)?;
                }
                if let (Some(dw), Some(db)) = (dw, db) {
                    self.accumulate(grads, *w, wt.shape(), dw)?;
                    self.accumulate(grads, *b, &[geom.c_out], db)?;
                }
            }
            Op::MaxPool { x, argmax } => {
                let xt = self.val(*x);
                let mut dx = vec![0.0f32; xt.len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src as usize] += gv;
                }
                self.accumulate(grads, *x, xt.shape(), dx)?;
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.val(*x).shape();
                let hw = xs[2] * xs[3];
                let inv = 1.0 / hw as f32;
                let mut dx = Vec::with_capacity(hw * g.len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.accumulate(grads, *x, xs, dx)?;
            }
            Op::Relu { x } => {
                let xt = self.val(*x);
                let dx = xt.data().iter().zip(g.data()).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                self.accumulate(grads, *x, xt.shape(), dx)?;
            }
            Op::Add { a, b } => {
                let shape = g.shape();
                self.accumulate(grads, *a, shape, g.data().to_vec())?;
                self.accumulate(grads, *b, shape, g.data().to_vec())?;
            }
            Op::Softmax { x } => {
                let k = g.shape()[1];
                let probs = kernels::softmax_rows(self.val(*x).data(), k);
                let mut dx = vec![0.0f32; probs.len()];
                for ((p, gr), d) in probs.chunks(k).zip(g.data().chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f32 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        d[j] = p[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, g.shape(), dx)?;
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let shape = self.val(*logits).shape();
                let k = shape[1];
                let scale = g.data()[0] / labels.len() as f32;
                let mut dz = probs.clone();
                for (row, &y) in dz.chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, shape, dz)?;
            }
            Op::SumSquares { x } => {
                let xt = self.val(*x);
                let s = g.data()[0];
                let dx = xt.data().iter().map(|&v| 2.0 * v * s).collect();
                self.accumulate(grads, *x, xt.shape(), dx)?;
            }
        }
        Ok(())
    }
}
