//! Wengert-list tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs have
//! smaller indices and a reverse index sweep is a reverse topological order.
//! A gradient pass can itself be recorded onto the tape
//! ([`Graph::grad_graph`]); a second, plain pass over the extended tape then
//! yields Hessian-vector products.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::quant;

/// Handle to a node on a [`Graph`].
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
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv { x: Var, w: Var, geom: ConvGeom },
    ConvBackInput { g: Var, w: Var, geom: ConvGeom },
    ConvBackWeight { x: Var, g: Var, geom: ConvGeom },
    MaskMul { x: Var, mask: Arc<[f64]> },
    Gather { x: Var, idx: Arc<[usize]> },
    Scatter { x: Var, idx: Arc<[usize]> },
    Add { a: Var, b: Var },
    Broadcast { b: Var },
    SumChannels { x: Var },
    Reshape { x: Var },
    Scale { x: Var, c: f64 },
    ScaleBy { x: Var, s: Var },
    Dot { a: Var, b: Var },
    Sum { x: Var },
    Fill { s: Var },
    SoftmaxCe { logits: Var, onehot: Arc<[f64]>, probs: Arc<[f64]> },
    SoftmaxCeGrad { logits: Var, probs: Arc<[f64]> },
    BatchNorm { x: Var, gamma: Var, beta: Var, inv_std: Arc<[f64]>, xhat: Arc<[f64]> },
    StraightThrough { x: Var, pass: Arc<[f64]> },
    ActQuant { x: Var, clip: Var, pass: Arc<[f64]>, saturated: Arc<[f64]> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Conv { .. } => "conv2d",
            Op::ConvBackInput { .. } => "conv2d_back_input",
            Op::ConvBackWeight { .. } => "conv2d_back_weight",
            Op::MaskMul { .. } => "mask_mul",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::Add { .. } => "add",
            Op::Broadcast { .. } => "broadcast",
            Op::SumChannels { .. } => "sum_channels",
            Op::Reshape { .. } => "reshape",
            Op::Scale { .. } => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Dot { .. } => "dot",
            Op::Sum { .. } => "sum",
            Op::Fill { .. } => "fill",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::SoftmaxCeGrad { .. } => "softmax_cross_entropy_grad",
            Op::BatchNorm { .. } => "batch_norm",
            Op::StraightThrough { .. } => "straight_through",
            Op::ActQuant { .. } => "act_quant",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Dot { a, b } => vec![a, b],
            Op::Conv { x, w, .. } => vec![x, w],
            Op::ConvBackInput { g, w, .. } => vec![g, w],
            Op::ConvBackWeight { x, g, .. } => vec![x, g],
            Op::ScaleBy { x, s } => vec![x, s],
            Op::ActQuant { x, clip, .. } => vec![x, clip],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::MaskMul { x, .. }
            | Op::Gather { x, .. }
            | Op::Scatter { x, .. }
            | Op::SumChannels { x }
            | Op::Reshape { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::StraightThrough { x, .. } => vec![x],
            Op::Broadcast { b } => vec![b],
            Op::Fill { s } => vec![s],
            Op::SoftmaxCe { logits, .. } | Op::SoftmaxCeGrad { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by a plain reverse pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording tape plus accumulated leaf gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "channel ops need a batch and channel axis, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn broadcast_channels(b: &[f64], shape: &[usize]) -> Vec<f64> {
    let (n, c, inner) = channel_layout(shape).expect("validated at record time");
    let mut out = Vec::with_capacity(n * c * inner);
    for _ in 0..n {
        for &bv in b.iter().take(c) {
            out.extend(std::iter::repeat_n(bv, inner));
        }
    }
    out
}

fn sum_channels(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (n, c, inner) = channel_layout(shape).expect("validated at record time");
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (i * c + ch) * inner;
            *o += x[base..base + inner].iter().sum::<f64>();
        }
    }
    out
}

fn mm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (m, k, n) = kernels::matmul_dims(a.shape(), b.shape(), ta, tb).expect("recorded shapes");
    Tensor::from_parts(vec![m, n], kernels::gemm(a.data(), b.data(), m, k, n, ta, tb))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` with optional transposes of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        kernels::matmul_dims(av.shape(), bv.shape(), ta, tb)?;
        let out = mm(av, bv, ta, tb);
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), &geom);
        self.push(
            Tensor::from_parts(geom.output_shape(), out),
            Op::Conv { x, w, geom },
        )
    }

    fn conv_back_input(&mut self, g: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv2d_back_input(self.value(g).data(), self.value(w).data(), &geom);
        self.push(
            Tensor::from_parts(geom.input_shape(), out),
            Op::ConvBackInput { g, w, geom },
        )
    }

    fn conv_back_weight(&mut self, x: Var, g: Var, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv2d_back_weight(self.value(x).data(), self.value(g).data(), &geom);
        self.push(
            Tensor::from_parts(geom.weight_shape(), out),
            Op::ConvBackWeight { x, g, geom },
        )
    }

    fn mask_mul(&mut self, x: Var, mask: Arc<[f64]>) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), zip_map(xv.data(), &mask, |a, m| a * m));
        self.push(out, Op::MaskMul { x, mask })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mask: Arc<[f64]> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        self.mask_mul(x, mask)
    }

    /// 2×2, stride-2 max pooling over a B×C×H×W tensor.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (idx, shape) = kernels::max_pool2_indices(self.value(x).data(), self.value(x).shape())?;
        self.gather(x, idx.into(), shape)
    }

    fn gather(&mut self, x: Var, idx: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        let out: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        self.push(Tensor::from_parts(shape, out), Op::Gather { x, idx })
    }

    fn scatter(&mut self, x: Var, idx: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let mut out = vec![0.0; shape.iter().product()];
        for (&i, &v) in idx.iter().zip(self.value(x).data()) {
            out[i] += v;
        }
        self.push(Tensor::from_parts(shape, out), Op::Scatter { x, idx })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "add operands differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = Tensor::from_parts(av.shape().to_vec(), zip_map(av.data(), bv.data(), |x, y| x + y));
        self.push(out, Op::Add { a, b })
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let bb = self.broadcast(b, shape)?;
        self.add(x, bb)
    }

    fn broadcast(&mut self, b: Var, shape: Vec<usize>) -> Result<Var> {
        let (_, c, _) = channel_layout(&shape)?;
        if self.value(b).shape() != [c] {
            return Err(Error::Shape(format!(
                "bias of shape {:?} cannot broadcast over {c} channels",
                self.value(b).shape()
            )));
        }
        let out = broadcast_channels(self.value(b).data(), &shape);
        self.push(Tensor::from_parts(shape, out), Op::Broadcast { b })
    }

    fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (_, c, _) = channel_layout(&shape)?;
        let out = sum_channels(self.value(x).data(), &shape);
        self.push(Tensor::from_parts(vec![c], out), Op::SumChannels { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape { x })
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (rows, len) = self.value(x).rows();
        self.reshape(x, &[rows, len])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect());
        self.push(out, Op::Scale { x, c })
    }

    /// Multiplies `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v * sv).collect());
        self.push(out, Op::ScaleBy { x, s })
    }

    /// Inner product of two same-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "dot operands differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot { a, b })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    fn fill(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(s).item()?;
        self.push(Tensor::full(shape, v), Op::Fill { s })
    }

    /// Mean softmax cross-entropy of `B×K` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.shape().len() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "logits {:?} do not match {} labels",
                z.shape(),
                labels.len()
            )));
        }
        let (b, k) = (z.shape()[0], z.shape()[1]);
        let mut probs = vec![0.0; b * k];
        let mut onehot = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            let row = &z.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / denom;
            }
            onehot[i * k + y] = 1.0;
            loss += denom.ln() - (row[y] - max);
        }
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxCe {
                logits,
                onehot: onehot.into(),
                probs: probs.into(),
            },
        )
    }

    fn softmax_ce_grad(&mut self, logits: Var, probs: Arc<[f64]>, onehot: &[f64]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        let b = shape[0] as f64;
        let out = zip_map(&probs, onehot, |p, y| (p - y) / b);
        self.push(Tensor::from_parts(shape, out), Op::SoftmaxCeGrad { logits, probs })
    }

    /// Batch norm in inference form: frozen running statistics, trainable
    /// per-channel `gamma` and `beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, inner) = channel_layout(&shape)?;
        for (name, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::Shape(format!("batch_norm {name} has {len} entries, expected {c}")));
            }
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for s in base..base + inner {
                    xhat[s] = (xv[s] - running_mean[ch]) * inv_std[ch];
                    out[s] = gv[ch] * xhat[s] + bv[ch];
                }
            }
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                inv_std: inv_std.into(),
                xhat: xhat.into(),
            },
        )
    }

    /// Straight-through estimator: the forward value is `projected`, the
    /// backward pass is the identity where `pass` is set and zero elsewhere.
    pub fn straight_through(&mut self, x: Var, projected: Tensor, pass: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if projected.shape() != xv.shape() || pass.len() != xv.len() {
            return Err(Error::Shape(format!(
                "projection of shape {:?} does not match input {:?}",
                projected.shape(),
                xv.shape()
            )));
        }
        let pass: Arc<[f64]> = pass.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        self.push(projected, Op::StraightThrough { x, pass })
    }

    /// Unsigned `bits`-bit activation quantization on `[0, clip]` with a
    /// learnable clip: identity gradient inside the range, the clip collects
    /// the gradient of saturated entries.
    pub fn act_quant(&mut self, x: Var, clip: Var, bits: u32) -> Result<Var> {
        let c = self.value(clip).item()?;
        if c <= 0.0 {
            return Err(Error::InvalidArgument(format!("activation clip must be positive, got {c}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut pass = Vec::with_capacity(xv.len());
        let mut sat = Vec::with_capacity(xv.len());
        for &v in xv.data() {
            out.push(quant::quantize_activation_value(v, bits, c));
            pass.push(if (0.0..=c).contains(&v) { 1.0 } else { 0.0 });
            sat.push(if v > c { 1.0 } else { 0.0 });
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::ActQuant {
                x,
                clip,
                pass: pass.into(),
                saturated: sat.into(),
            },
        )
    }

    // ---- reverse passes ----------------------------------------------------

    fn check_scalar(&self, v: Var) -> Result<()> {
        let shape = self.value(v).shape();
        if self.value(v).len() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        Ok(())
    }

    /// Accumulates `∂loss/∂leaf` into every leaf that requires a gradient.
    /// Repeated calls add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let mut grads = self.gradients(loss)?;
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let g = grads
                .take(Var(i))
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            accumulate(&mut self.leaf_grads, Var(i), g);
        }
        Ok(())
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Leaf gradients of a scalar, without touching the accumulators.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        self.check_scalar(loss)?;
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.vjp(&[(loss, &seed)])
    }

    /// Vector-Jacobian product: propagates the given cotangents backwards and
    /// returns the resulting leaf gradients.
    pub fn vjp(&self, seeds: &[(Var, &Tensor)]) -> Result<Gradients> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(Gradients { grads: vec![] });
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; top + 1];
        for &(v, t) in seeds {
            if t.shape() != self.value(v).shape() {
                return Err(Error::Shape(format!(
                    "cotangent {:?} does not match node shape {:?}",
                    t.shape(),
                    self.value(v).shape()
                )));
            }
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads, v, t.clone());
            }
        }
        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor| {
            if needs(v) {
                accumulate(grads, v, t);
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if needs(a) {
                    let da = if ta { mm(bv, g, tb, true) } else { mm(g, bv, false, !tb) };
                    send(a, da);
                }
                if needs(b) {
                    let db = if tb { mm(g, av, true, ta) } else { mm(av, g, !ta, false) };
                    send(b, db);
                }
            }
            Op::Conv { x, w, geom } => {
                if needs(*x) {
                    send(*x, like(*x, kernels::conv2d_back_input(g.data(), self.value(*w).data(), geom)));
                }
                if needs(*w) {
                    send(*w, like(*w, kernels::conv2d_back_weight(self.value(*x).data(), g.data(), geom)));
                }
            }
            Op::ConvBackInput { g: gy, w, geom } => {
                if needs(*gy) {
                    send(*gy, like(*gy, kernels::conv2d(g.data(), self.value(*w).data(), geom)));
                }
                if needs(*w) {
                    send(*w, like(*w, kernels::conv2d_back_weight(g.data(), self.value(*gy).data(), geom)));
                }
            }
            Op::ConvBackWeight { x, g: gy, geom } => {
                if needs(*gy) {
                    send(*gy, like(*gy, kernels::conv2d(self.value(*x).data(), g.data(), geom)));
                }
                if needs(*x) {
                    send(*x, like(*x, kernels::conv2d_back_input(self.value(*gy).data(), g.data(), geom)));
                }
            }
            Op::MaskMul { x, mask } | Op::StraightThrough { x, pass: mask } => {
                send(*x, like(*x, zip_map(g.data(), mask, |a, m| a * m)));
            }
            Op::Gather { x, idx } => {
                let mut out = vec![0.0; self.value(*x).len()];
                for (&j, &v) in idx.iter().zip(g.data()) {
                    out[j] += v;
                }
                send(*x, like(*x, out));
            }
            Op::Scatter { x, idx } => {
                send(*x, like(*x, idx.iter().map(|&j| g.data()[j]).collect()));
            }
            &Op::Add { a, b } => {
                send(a, g.clone());
                send(b, g.clone());
            }
            &Op::Broadcast { b } => send(b, like(b, sum_channels(g.data(), g.shape()))),
            &Op::SumChannels { x } => {
                send(x, like(x, broadcast_channels(g.data(), self.value(x).shape())));
            }
            &Op::Reshape { x } => send(x, like(x, g.data().to_vec())),
            &Op::Scale { x, c } => send(x, like(x, g.data().iter().map(|v| v * c).collect())),
            &Op::ScaleBy { x, s } => {
                let sv = self.value(s).data()[0];
                if needs(x) {
                    send(x, like(x, g.data().iter().map(|v| v * sv).collect()));
                }
                if needs(s) {
                    let d = g.data().iter().zip(self.value(x).data()).map(|(a, b)| a * b).sum();
                    send(s, Tensor::scalar(d));
                }
            }
            &Op::Dot { a, b } => {
                let c = g.data()[0];
                if needs(a) {
                    send(a, like(a, self.value(b).data().iter().map(|v| v * c).collect()));
                }
                if needs(b) {
                    send(b, like(b, self.value(a).data().iter().map(|v| v * c).collect()));
                }
            }
            &Op::Sum { x } => send(x, Tensor::full(self.value(x).shape(), g.data()[0])),
            &Op::Fill { s } => send(s, Tensor::scalar(g.data().iter().sum())),
            Op::SoftmaxCe { logits, onehot, probs } => {
                let c = g.data()[0] / self.value(*logits).shape()[0] as f64;
                send(*logits, like(*logits, zip_map(probs, onehot, |p, y| c * (p - y))));
            }
            Op::SoftmaxCeGrad { logits, probs } => {
                // Jacobian of softmax(z)/B: (diag(p) − p pᵀ)/B per row.
                let shape = self.value(*logits).shape();
                let (b, k) = (shape[0], shape[1]);
                let mut out = vec![0.0; b * k];
                for r in 0..b {
                    let p = &probs[r * k..(r + 1) * k];
                    let u = &g.data()[r * k..(r + 1) * k];
                    let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[r * k + j] = p[j] * (u[j] - pu) / b as f64;
                    }
                }
                send(*logits, like(*logits, out));
            }
            Op::BatchNorm { x, gamma, beta, inv_std, xhat } => {
                let (n, c, inner) = channel_layout(g.shape())?;
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for s in base..base + inner {
                            let gs = g.data()[s];
                            dx[s] = gs * gam[ch] * inv_std[ch];
                            dgamma[ch] += gs * xhat[s];
                            dbeta[ch] += gs;
                        }
                    }
                }
                send(*x, like(*x, dx));
                send(*gamma, like(*gamma, dgamma));
                send(*beta, like(*beta, dbeta));
            }
            Op::ActQuant { x, clip, pass, saturated } => {
                if needs(*x) {
                    send(*x, like(*x, zip_map(g.data(), pass, |a, m| a * m)));
                }
                if needs(*clip) {
                    let d = g.data().iter().zip(saturated.iter()).map(|(a, m)| a * m).sum();
                    send(*clip, Tensor::scalar(d));
                }
            }
        }
        Ok(())
    }

    /// Records the gradient computation of `loss` onto the tape and returns,
    /// for each of `wrt`, the node holding `∂loss/∂wrt` (or `None` when the
    /// loss does not depend on it). The returned nodes can be differentiated
    /// again with [`Graph::vjp`].
    pub fn grad_graph(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        self.check_scalar(loss)?;
        let top = loss.0;
        let seed = self.constant(Tensor::full(self.value(loss).shape(), 1.0))?;
        let mut cot: Vec<Option<Var>> = vec![None; top + 1];
        if self.nodes[top].requires_grad {
            cot[top] = Some(seed);
        }
        for i in (0..=top).rev() {
            let Some(c) = cot[i] else { continue };
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            self.backprop_recorded(&op, c, &mut cot)?;
        }
        Ok(wrt.iter().map(|v| cot.get(v.0).copied().flatten()).collect())
    }

    fn backprop_recorded(&mut self, op: &Op, c: Var, cot: &mut [Option<Var>]) -> Result<()> {
        let targets: Vec<Var> = op
            .inputs()
            .into_iter()
            .filter(|v| self.nodes[v.0].requires_grad)
            .collect();
        let mut out: Vec<(Var, Var)> = Vec::with_capacity(targets.len());
        let needs = |v: Var| targets.contains(&v);
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                if needs(a) {
                    let da = if ta { self.matmul_t(b, c, tb, true)? } else { self.matmul_t(c, b, false, !tb)? };
                    out.push((a, da));
                }
                if needs(b) {
                    let db = if tb { self.matmul_t(c, a, true, ta)? } else { self.matmul_t(a, c, !ta, false)? };
                    out.push((b, db));
                }
            }
            &Op::Conv { x, w, geom } => {
                if needs(x) {
                    out.push((x, self.conv_back_input(c, w, geom)?));
                }
                if needs(w) {
                    out.push((w, self.conv_back_weight(x, c, geom)?));
                }
            }
            &Op::ConvBackInput { g, w, geom } => {
                if needs(g) {
                    let v = self.push_conv(c, w, geom)?;
                    out.push((g, v));
                }
                if needs(w) {
                    out.push((w, self.conv_back_weight(c, g, geom)?));
                }
            }
            &Op::ConvBackWeight { x, g, geom } => {
                if needs(g) {
                    let v = self.push_conv(x, c, geom)?;
                    out.push((g, v));
                }
                if needs(x) {
                    out.push((x, self.conv_back_input(g, c, geom)?));
                }
            }
            Op::MaskMul { x, mask } | Op::StraightThrough { x, pass: mask } => {
                out.push((*x, self.mask_mul(c, mask.clone())?));
            }
            Op::Gather { x, idx } => {
                let shape = self.value(*x).shape().to_vec();
                out.push((*x, self.scatter(c, idx.clone(), shape)?));
            }
            Op::Scatter { x, idx } => {
                let shape = self.value(*x).shape().to_vec();
                out.push((*x, self.gather(c, idx.clone(), shape)?));
            }
            &Op::Add { a, b } => {
                if needs(a) {
                    out.push((a, c));
                }
                if needs(b) {
                    out.push((b, c));
                }
            }
            &Op::Broadcast { b } => out.push((b, self.sum_channels(c)?)),
            &Op::SumChannels { x } => {
                let shape = self.value(x).shape().to_vec();
                out.push((x, self.broadcast(c, shape)?));
            }
            &Op::Reshape { x } => {
                let shape = self.value(x).shape().to_vec();
                out.push((x, self.reshape(c, &shape)?));
            }
            &Op::Scale { x, c: k } => out.push((x, self.scale(c, k)?)),
            &Op::ScaleBy { x, s } => {
                if needs(x) {
                    out.push((x, self.scale_by(c, s)?));
                }
                if needs(s) {
                    out.push((s, self.dot(c, x)?));
                }
            }
            &Op::Dot { a, b } => {
                if needs(a) {
                    out.push((a, self.scale_by(b, c)?));
                }
                if needs(b) {
                    out.push((b, self.scale_by(a, c)?));
                }
            }
            &Op::Sum { x } => {
                let shape = self.value(x).shape().to_vec();
                out.push((x, self.fill(c, &shape)?));
            }
            &Op::Fill { s } => out.push((s, self.sum(c)?)),
            Op::SoftmaxCe { logits, onehot, probs } => {
                let grad = self.softmax_ce_grad(*logits, probs.clone(), onehot)?;
                let scaled = if self.nodes[c.0].requires_grad {
                    self.scale_by(grad, c)?
                } else {
                    let k = self.value(c).item()?;
                    if k == 1.0 { grad } else { self.scale(grad, k)? }
                };
                out.push((*logits, scaled));
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "second-order differentiation through {}",
                    other.name()
                )))
            }
        }
        for (target, g) in out {
            let merged = match cot[target.0] {
                Some(prev) => self.add(prev, g)?,
                None => g,
            };
            cot[target.0] = Some(merged);
        }
        Ok(())
    }

    fn push_conv(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), &geom);
        self.push(Tensor::from_parts(geom.output_shape(), out), Op::Conv { x, w, geom })
    }

    /// Hessian-vector product `H·v = ∂(gᵀv)/∂wrt` with `g = ∂scalar/∂wrt`.
    pub fn grad_of_grad(&mut self, scalar: Var, wrt: Var, vector: &Tensor) -> Result<Tensor> {
        if vector.shape() != self.value(wrt).shape() {
            return Err(Error::Shape(format!(
                "vector {:?} does not match parameter {:?}",
                vector.shape(),
                self.value(wrt).shape()
            )));
        }
        let zeros = || Tensor::zeros(vector.shape());
        let Some(g) = self.grad_graph(scalar, &[wrt])?[0] else {
            return Ok(zeros());
        };
        let mut grads = self.vjp(&[(g, vector)])?;
        Ok(grads.take(wrt).unwrap_or_else(zeros))
    }
}
