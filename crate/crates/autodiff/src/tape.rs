//! Wengert-list reverse mode.
//!
//! A [`Tape`] records every operation whose inputs depend on a tensor that
//! requires a gradient. [`Var`] is a cheap handle to a recorded value. Values
//! computed purely from constants are stored without their op, so constant
//! sub-graphs cost nothing during [`Tape::backward`].
//!
//! Second-order quantities (the input gradient inside a gradient penalty) are
//! obtained by building the gradient as an ordinary forward graph out of the
//! ops below and then differentiating that graph once more.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output length `ceil(len / stride)`; extra padding goes to the right.
    Same,
    Explicit(usize, usize),
}

#[derive(Clone, Debug)]
pub enum BatchNormMode {
    /// Normalize with batch statistics.
    Train { epsilon: f64 },
    /// Normalize with supplied (running) statistics.
    Infer {
        mean: Vec<f64>,
        var: Vec<f64>,
        epsilon: f64,
    },
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Conv1d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geometry: ConvGeometry,
    },
    LeakyRelu(usize, f64),
    Relu(usize),
    Softplus(usize),
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        channels: usize,
        inner: usize,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
        train: bool,
    },
    Dropout(usize, Rc<Vec<f64>>),
    L2Normalize(usize, Vec<f64>),
    ReduceMean(usize),
    Sum(usize),
    SumLastAxis(usize),
    Square(usize),
    Sqrt(usize),
    EuclideanNorm(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
        sizes: Vec<usize>,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    SelectRows(usize, Rc<Vec<usize>>),
    Reshape(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Rc<Vec<usize>>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Transpose(a) | AddScalar(a) | Scale(a, _) | LeakyRelu(a, _) | Relu(a) | Softplus(a)
            | Dropout(a, _) | L2Normalize(a, _) | ReduceMean(a) | Sum(a) | SumLastAxis(a)
            | Square(a) | Sqrt(a) | EuclideanNorm(a) | SelectRows(a, _) | Reshape(a) => vec![*a],
            Conv1d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Concat { inputs, .. } => inputs.clone(),
            Slice { input, .. } => vec![*input],
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass. Single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A tensor on a tape: its value plus the op that produced it.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// Broadcast classification of `b` against `a`: same shape, suffix, or scalar.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || (b.len() <= a.len() && a[a.len() - b.len()..] == *b) || numel(b) == 1
}

/// Sums a gradient of shape `a` down to a broadcast operand with `b_len` elements.
fn reduce_to(g: &[f64], b_len: usize) -> Vec<f64> {
    if g.len() == b_len {
        return g.to_vec();
    }
    let mut out = vec![0.0; b_len];
    for chunk in g.chunks(b_len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn zip_broadcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let bl = b.len();
    a.iter().enumerate().map(|(i, &x)| f(x, b[i % bl])).collect()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let mut sizes = Vec::with_capacity(vars.len());
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (v, &size) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * size * inner..(o + 1) * size * inner]);
            }
        }
        Ok(self.push_node(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: vars.iter().map(|v| v.id).collect(),
                axis,
                sizes,
            },
        ))
    }

    /// Reverse-mode pass from a one-element `loss`.
    ///
    /// Returns gradients for every leaf that requires one; intermediate
    /// gradients are discarded as soon as they have been propagated.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = vec![None; loss.id + 1];

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    out[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let needs = |id: usize| nodes[id].requires_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(*a) {
                accumulate(nodes, grads, *a, kernels::matmul_nt(g, bv.data(), m, n, k));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, kernels::matmul_tn(av.data(), g, m, k, n));
            }
        }
        Op::Transpose(a) => {
            let s = val(*a).shape();
            accumulate(nodes, grads, *a, kernels::transpose(g, s[1], s[0]));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            if needs(*b) {
                accumulate(nodes, grads, *b, reduce_to(g, val(*b).len()));
            }
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            if needs(*b) {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(nodes, grads, *b, reduce_to(&neg, val(*b).len()));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                accumulate(nodes, grads, *a, zip_broadcast(g, bv.data(), |gi, bi| gi * bi));
            }
            if needs(*b) {
                let prod: Vec<f64> = g.iter().zip(av.data()).map(|(gi, ai)| gi * ai).collect();
                accumulate(nodes, grads, *b, reduce_to(&prod, bv.len()));
            }
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.iter().map(|v| v * c).collect()),
        Op::Conv1d {
            input,
            kernel,
            bias,
            geometry,
        } => {
            let (dx, dw, db) = kernels::conv1d_backward(
                val(*input).data(),
                val(*kernel).data(),
                g,
                geometry,
                needs(*input),
                needs(*kernel),
                bias.map(needs).unwrap_or(false),
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *input, dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *kernel, dw);
            }
            if let (Some(db), Some(b)) = (db, bias) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::LeakyRelu(a, slope) => {
            let d = g
                .iter()
                .zip(val(*a).data())
                .map(|(gi, &x)| if x > 0.0 { *gi } else { gi * slope })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Relu(a) => {
            let d = g
                .iter()
                .zip(val(*a).data())
                .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Softplus(a) => {
            let d = g
                .iter()
                .zip(val(*a).data())
                .map(|(gi, &x)| gi * sigmoid(x))
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            channels,
            inner,
            inv_std,
            xhat,
            train,
        } => {
            let x = val(*input).data();
            let gam = val(*gamma).data();
            let (c, inner) = (*channels, *inner);
            let batch = x.len() / (c * inner);
            let count = (batch * inner) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (r, (gr, hr)) in g.chunks_exact(inner).zip(xhat.chunks_exact(inner)).enumerate() {
                dgamma[r % c] += gr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>();
                dbeta[r % c] += gr.iter().sum::<f64>();
            }
            if needs(*input) {
                let mut dx = vec![0.0; x.len()];
                for (r, ((dr, gr), hr)) in dx
                    .chunks_exact_mut(inner)
                    .zip(g.chunks_exact(inner))
                    .zip(xhat.chunks_exact(inner))
                    .enumerate()
                {
                    let ch = r % c;
                    let scale = gam[ch] * inv_std[ch];
                    if *train {
                        let mean_dy = dbeta[ch] / count;
                        let mean_dy_xhat = dgamma[ch] / count;
                        for ((d, gi), h) in dr.iter_mut().zip(gr).zip(hr) {
                            *d = scale * (gi - mean_dy - h * mean_dy_xhat);
                        }
                    } else {
                        for (d, gi) in dr.iter_mut().zip(gr) {
                            *d = scale * gi;
                        }
                    }
                }
                accumulate(nodes, grads, *input, dx);
            }
            if needs(*gamma) {
                accumulate(nodes, grads, *gamma, dgamma);
            }
            if needs(*beta) {
                accumulate(nodes, grads, *beta, dbeta);
            }
        }
        Op::Dropout(a, scaled_mask) => {
            let d = g.iter().zip(scaled_mask.iter()).map(|(gi, m)| gi * m).collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::L2Normalize(a, norms) => {
            let d = y.shape().last().copied().unwrap_or(1);
            let mut dx = vec![0.0; g.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let ys = &y.data()[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let proj = kernels::dot(ys, gs);
                for i in 0..d {
                    dx[r * d + i] = (gs[i] - ys[i] * proj) / norm;
                }
            }
            accumulate(nodes, grads, *a, dx);
        }
        Op::ReduceMean(a) => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, vec![g[0] / n as f64; n]);
        }
        Op::Sum(a) => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, vec![g[0]; n]);
        }
        Op::SumLastAxis(a) => {
            let av = val(*a);
            let d = *av.shape().last().unwrap();
            let dx = (0..av.len()).map(|i| g[i / d]).collect();
            accumulate(nodes, grads, *a, dx);
        }
        Op::Square(a) => {
            let d = g
                .iter()
                .zip(val(*a).data())
                .map(|(gi, x)| 2.0 * x * gi)
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Sqrt(a) => {
            let d = g
                .iter()
                .zip(y.data())
                .map(|(gi, &s)| if s > 0.0 { gi / (2.0 * s) } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::EuclideanNorm(a) => {
            let av = val(*a);
            let d = *av.shape().last().unwrap();
            let dx = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let norm = y.data()[i / d];
                    if norm > 0.0 {
                        g[i / d] * x / norm
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, *a, dx);
        }
        Op::Concat {
            inputs,
            axis,
            sizes,
        } => {
            let total: usize = sizes.iter().sum();
            let (outer, _, inner) = split_axis(y.shape(), *axis);
            let mut offset = 0;
            for (&input, &size) in inputs.iter().zip(sizes) {
                if needs(input) {
                    let mut d = Vec::with_capacity(outer * size * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + size * inner]);
                    }
                    accumulate(nodes, grads, input, d);
                }
                offset += size;
            }
        }
        Op::Slice { input, axis, start } => {
            let xs = val(*input).shape();
            let (outer, full, inner) = split_axis(xs, *axis);
            let len = y.shape()[*axis];
            let mut d = vec![0.0; numel(xs)];
            for o in 0..outer {
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let dst = (o * full + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(src);
            }
            accumulate(nodes, grads, *input, d);
        }
        Op::SelectRows(a, indices) => {
            let av = val(*a);
            let width = av.len() / av.shape()[0];
            let mut d = vec![0.0; av.len()];
            for (r, &src) in indices.iter().enumerate() {
                for i in 0..width {
                    d[src * width + i] += g[r * width + i];
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = val(*logits).shape()[1];
            let n = labels.len() as f64;
            let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / n).collect();
            for (r, &label) in labels.iter().enumerate() {
                d[r * k + label] -= g[0] / n;
            }
            accumulate(nodes, grads, *logits, d);
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
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push_node(value, op)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value();
        self.push(v.map(f), op)
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::invalid(op, "operands live on different tapes"))
        }
    }

    /// `[m,k] x [k,n]`
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "matmul")?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let data = kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]);
        Ok(self.push(
            Tensor::from_parts(vec![sa[0], sb[1]], data),
            Op::MatMul(self.id, other.id),
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 {
            return Err(TensorError::invalid("transpose", format!("expected 2-D, got {s:?}")));
        }
        let data = kernels::transpose(a.data(), s[0], s[1]);
        Ok(self.push(Tensor::from_parts(vec![s[1], s[0]], data), Op::Transpose(self.id)))
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other, name)?;
        let (a, b) = (self.value(), other.value());
        if !broadcast_ok(a.shape(), b.shape()) {
            return Err(TensorError::mismatch(name, a.shape(), b.shape()));
        }
        let data = zip_broadcast(a.data(), b.data(), f);
        Ok(self.push(Tensor::from_parts(a.shape().to_vec(), data), op))
    }

    /// Elementwise sum; `other` may be a suffix-broadcast or one-element operand.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise product with the same broadcasting rule as [`Var::add`].
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `[batch, in, len]` convolved with `[out, in, k]`, optional bias `[out]`.
    pub fn conv1d(
        &self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var<'t>> {
        self.same_tape(&kernel, "conv1d")?;
        let (x, w) = (self.value(), kernel.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(TensorError::mismatch("conv1d", sx, sw));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv1d", "stride must be >= 1"));
        }
        let (len, k) = (sx[2], sw[2]);
        let (pad_left, pad_right) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let out = len.div_ceil(stride);
                let total = ((out - 1) * stride + k).saturating_sub(len);
                (total / 2, total - total / 2)
            }
            Padding::Explicit(l, r) => (l, r),
        };
        if len + pad_left + pad_right < k {
            return Err(TensorError::invalid(
                "conv1d",
                format!("kernel {k} longer than padded input {}", len + pad_left + pad_right),
            ));
        }
        let out_length = (len + pad_left + pad_right - k) / stride + 1;
        let geometry = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            out_channels: sw[0],
            length: len,
            kernel: k,
            stride,
            pad_left,
            out_length,
        };
        let bias_val = match bias {
            Some(b) => {
                self.same_tape(&b, "conv1d")?;
                let bv = b.value();
                if bv.shape() != [sw[0]] {
                    return Err(TensorError::mismatch("conv1d bias", &[sw[0]], bv.shape()));
                }
                Some(bv)
            }
            None => None,
        };
        let data =
            kernels::conv1d_forward(x.data(), w.data(), bias_val.as_deref().map(|b| b.data()), &geometry);
        Ok(self.push(
            Tensor::from_parts(vec![sx[0], sw[0], out_length], data),
            Op::Conv1d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geometry,
            },
        ))
    }

    /// Slope `slope` for `x <= 0`, identity otherwise.
    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(self.id, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    /// Batch normalization over every axis except axis 1.
    ///
    /// Input is `[batch, channels]` or `[batch, channels, len]`. In training
    /// mode the batch statistics are returned so the caller can maintain
    /// running averages.
    pub fn batch_norm(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mode: &BatchNormMode,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 || s.len() > 3 {
            return Err(TensorError::invalid("batch_norm", format!("unsupported shape {s:?}")));
        }
        let (batch, c) = (s[0], s[1]);
        let inner = if s.len() == 3 { s[2] } else { 1 };
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::mismatch("batch_norm", &[c], &gamma.shape()));
        }
        let count = (batch * inner) as f64;
        let xd = x.data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { epsilon } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (r, row) in xd.chunks_exact(inner).enumerate() {
                    mean[r % c] += row.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for (r, row) in xd.chunks_exact(inner).enumerate() {
                    let m = mean[r % c];
                    var[r % c] += row.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, *epsilon, true)
            }
            BatchNormMode::Infer { mean, var, epsilon } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::mismatch("batch_norm", &[c], &[mean.len()]));
                }
                (mean.clone(), var.clone(), *epsilon, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let (gv, bv) = (gv.data(), bv.data());
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        for (r, ((xr, hr), or)) in xd
            .chunks_exact(inner)
            .zip(xhat.chunks_exact_mut(inner))
            .zip(out.chunks_exact_mut(inner))
            .enumerate()
        {
            let ch = r % c;
            let (m, is, ga, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
            for ((xv, h), o) in xr.iter().zip(hr.iter_mut()).zip(or.iter_mut()) {
                *h = (xv - m) * is;
                *o = *h * ga + be;
            }
        }
        let y = self.push(
            Tensor::from_parts(s.to_vec(), out),
            Op::BatchNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                channels: c,
                inner,
                inv_std,
                xhat,
                train,
            },
        );
        Ok((y, train.then_some(BatchStats { mean, var })))
    }

    /// Inverted dropout with an explicit keep mask of zeros and ones.
    pub fn dropout(&self, mask: &Tensor, rate: f64) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let x = self.value();
        if mask.shape() != x.shape() {
            return Err(TensorError::mismatch("dropout", x.shape(), mask.shape()));
        }
        let keep = 1.0 / (1.0 - rate);
        let scaled: Vec<f64> = mask.data().iter().map(|m| m * keep).collect();
        let data = x.data().iter().zip(&scaled).map(|(a, m)| a * m).collect();
        Ok(self.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::Dropout(self.id, Rc::new(scaled)),
        ))
    }

    /// Normalizes each vector along the last axis to unit Euclidean length.
    pub fn l2_normalize(&self) -> Var<'t> {
        const EPS: f64 = 1e-24;
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut norms = Vec::with_capacity(x.len() / d);
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            let norm = kernels::dot(row, row).max(EPS).sqrt();
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        self.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::L2Normalize(self.id, norms),
        )
    }

    pub fn reduce_mean(&self) -> Var<'t> {
        let x = self.value();
        self.push(Tensor::scalar(x.mean()), Op::ReduceMean(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        self.push(Tensor::scalar(x.sum()), Op::Sum(self.id))
    }

    /// Sums the last axis, keeping it with size 1.
    pub fn sum_last_axis(&self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let data: Vec<f64> = x.data().chunks(d).map(|c| c.iter().sum()).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        self.push(Tensor::from_parts(shape, data), Op::SumLastAxis(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.data().iter().any(|v| *v < 0.0) {
            return Err(TensorError::invalid("sqrt", "negative input"));
        }
        Ok(self.unary(Op::Sqrt(self.id), f64::sqrt))
    }

    /// Euclidean norm along the last axis, keeping it with size 1.
    pub fn euclidean_norm(&self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let data: Vec<f64> = x.data().chunks(d).map(|c| kernels::dot(c, c).sqrt()).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        self.push(Tensor::from_parts(shape, data), Op::EuclideanNorm(self.id))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Gathers rows (entries of axis 0); indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rows = x.shape()[0];
        if indices.is_empty() {
            return Err(TensorError::invalid("select_rows", "no indices"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid("select_rows", format!("row {bad} of {rows}")));
        }
        let width = x.len() / rows;
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::SelectRows(self.id, Rc::new(indices.to_vec())),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let t = (*x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(self.id)))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::mismatch("softmax_cross_entropy", s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of {k} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(x.len());
        let mut loss = 0.0;
        for (row, &label) in x.data().chunks(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += z.ln() + max - row[label];
            probs.extend(row.iter().map(|v| (v - max).exp() / z));
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                labels: Rc::new(labels.to_vec()),
                probs,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let loss = x.square();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let eye = tape.constant(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let v = tape.constant(Tensor::new(vec![3, 1], vec![4., -2., 7.]).unwrap());
        assert_eq!(eye.matmul(v).unwrap().value().data(), &[4., -2., 7.]);
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-2.0));
        assert!((x.leaky_relu(0.001).value().item() + 0.002).abs() < 1e-15);
    }

    #[test]
    fn leaky_relu_derivative_at_zero_uses_slope() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = x.leaky_relu(0.25).sum();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn mean_of_linear_map_gradient_is_input_over_batch() {
        // loss = mean(x W) with x [2,3], W [3,1]; dL/dW = column sums of x / 2
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let w = tape.param(Tensor::new(vec![3, 1], vec![0.3, -0.1, 0.5]).unwrap());
        let loss = x.matmul(w).unwrap().reduce_mean();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.5, 3.5, 4.5]);
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let g = tape.backward(x.square()).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let v = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v.square()), Err(TensorError::NonScalarLoss(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c.square()), Err(TensorError::Detached)));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones(vec![4]));
        assert!(a.dropout(&Tensor::ones(vec![4]), 1.0).is_err());
        assert!(a.dropout(&Tensor::ones(vec![4]), -0.1).is_err());
        let y = a.dropout(&Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]), 0.5).unwrap();
        assert_eq!(y.value().data(), &[2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones(vec![3]));
        let b = a.scale(2.0).square();
        assert!(!b.requires_grad());
        let p = tape.param(Tensor::ones(vec![3]));
        assert!(p.mul(b).unwrap().requires_grad());
    }

    #[test]
    fn conv_sliding_window_sum() {
        let tape = Tape::new();
        let x: Vec<f64> = (0..8).map(|v| (v * v) as f64).collect();
        let input = tape.constant(Tensor::new(vec![1, 1, 8], x.clone()).unwrap());
        let kernel = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0; 3]).unwrap());
        let y = input.conv1d(kernel, None, 1, Padding::Valid).unwrap().value();
        let oracle: Vec<f64> = (0..6).map(|i| (i..i + 3).map(|j| x[j]).sum()).collect();
        assert_eq!(y.data(), &oracle[..]);
    }

    #[test]
    fn same_padding_keeps_length() {
        let tape = Tape::new();
        let input = tape.constant(Tensor::ones(vec![2, 1, 16]));
        for k in [3, 4, 5, 12] {
            let kernel = tape.constant(Tensor::ones(vec![2, 1, k]));
            let y = input.conv1d(kernel, None, 1, Padding::Same).unwrap();
            assert_eq!(y.shape(), vec![2, 2, 16]);
        }
    }
}
