//! Recording tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! tape from the loss towards the leaves, so the node order is already a
//! valid topological order. Parameter leaves are memoised per graph: using
//! the same [`ParamId`] from several forward passes yields one leaf whose
//! gradient sums all uses.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Reshape,
    Softmax,
    Conv2d,
    Resize,
    Add,
    AddN,
    ScaleByEntry,
    Mul,
    Scale,
    Ln,
    Sum,
    Silu,
    Sigmoid,
    ChannelNorm,
    Concat,
    StructureLoss,
    Tversky,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Resize(Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    ScaleByEntry {
        x: Var,
        s: Var,
        index: usize,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Ln(Var),
    Sum(Var),
    Silu(Var),
    Sigmoid(Var),
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    StructureLoss {
        logits: Var,
        gt: Vec<f64>,
        weights: Vec<f64>,
    },
    Tversky {
        prob: Var,
        gt: Vec<f64>,
        a: f64,
        b: f64,
    },
}

impl Op {
    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Resize(a)
            | Op::Scale(a, _)
            | Op::Ln(a)
            | Op::Sum(a)
            | Op::Silu(a)
            | Op::Sigmoid(a) => vec![*a],
            Op::AddN(xs) | Op::Concat(xs) => xs.clone(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::ScaleByEntry { x, s, .. } => vec![*x, *s],
            Op::ChannelNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::StructureLoss { logits, .. } => vec![*logits],
            Op::Tversky { prob, .. } => vec![*prob],
        }
    }

    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Resize(_) => OpKind::Resize,
            Op::Add(..) => OpKind::Add,
            Op::AddN(_) => OpKind::AddN,
            Op::ScaleByEntry { .. } => OpKind::ScaleByEntry,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Ln(_) => OpKind::Ln,
            Op::Sum(_) => OpKind::Sum,
            Op::Silu(_) => OpKind::Silu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::ChannelNorm { .. } => OpKind::ChannelNorm,
            Op::Concat(_) => OpKind::Concat,
            Op::StructureLoss { .. } => OpKind::StructureLoss,
            Op::Tversky { .. } => OpKind::Tversky,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Variance epsilon of [`Graph::channel_norm`].
pub const NORM_EPS: f64 = 1e-5;

pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    params: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records gradients for parameter and input leaves.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            params: HashMap::new(),
            fault: None,
        }
    }

    /// A forward-only graph: no leaf requires gradients.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Test hook: every backward rule of `kind` returns the gradient of its
    /// last operand scaled by 1.5 (for `scale_by_entry` that is the scale
    /// vector, for `conv2d` the bias). Used to check that the gradient
    /// checker catches a broken rule.
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Frees the stored value of a node that no later op will read.
    /// Only allowed on forward-only graphs.
    pub fn discard(&mut self, v: Var) {
        if !self.recording {
            self.nodes[v.0].value = Tensor::scalar(0.0);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable non-parameter leaf (gradient available via [`Gradients`]).
    pub fn input(&mut self, value: Tensor) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).tensor.clone());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().expect("non-empty shape");
        let out = kernels::softmax_rows(t.data(), n);
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), &[x]))
    }

    /// `x: C_in×H×W`, `w: C_out×C_in×k×k`, `b: C_out`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let dims = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [c_out, c_in, k, k2] = ws[..] else {
            return Err(Error::Contract(format!("conv2d weight must be rank 4, got {ws:?}")));
        };
        if c_in != dims.0 || k != k2 {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: vec![dims.0, dims.1, dims.2],
                rhs: ws,
            });
        }
        if self.value(b).shape() != [c_out] {
            return Err(Error::Dimension {
                op: "conv2d bias",
                lhs: vec![c_out],
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let geom = ConvGeom::new(dims, c_out, k, stride, pad)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let t = Tensor::new(vec![c_out, geom.out_h, geom.out_w], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Contract("resize target must be at least 1×1".into()));
        }
        let (c, h, w) = self.value(x).dims3()?;
        let out = kernels::bilinear_resize(self.value(x).data(), c, h, w, out_h, out_w);
        Ok(self.push(Tensor::new(vec![c, out_h, out_w], out)?, Op::Resize(x), &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b]))
    }

    /// Sum of same-shape tensors, accumulated in list order.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("add_n needs at least one input".into()))?;
        let mut acc = self.value(first).data().to_vec();
        for &x in &xs[1..] {
            self.same_shape("add_n", first, x)?;
            for (a, v) in acc.iter_mut().zip(self.value(x).data()) {
                *a += v;
            }
        }
        let shape = self.shape(first).to_vec();
        Ok(self.push(Tensor::new(shape, acc)?, Op::AddN(xs.to_vec()), xs))
    }

    /// `s[index] · x` for a vector-valued `s`.
    pub fn scale_by_entry(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        let sv = self.value(s);
        if sv.rank() != 1 || index >= sv.numel() {
            return Err(Error::Contract(format!(
                "scale index {index} out of range for shape {:?}",
                sv.shape()
            )));
        }
        let k = sv.data()[index];
        let out: Vec<f64> = self.value(x).data().iter().map(|v| k * v).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleByEntry { x, s, index }, &[x, s]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| c * t.data()[i]);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i].ln());
        self.push(out, Op::Ln(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| {
            let v = t.data()[i];
            v * kernels::sigmoid(v)
        });
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| kernels::sigmoid(t.data()[i]));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Per-channel normalisation over the spatial extent of a `C×H×W` tensor
    /// followed by a learnable per-channel scale and shift.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        for (name, p) in [("scale", gamma), ("shift", beta)] {
            if self.shape(p) != [c] {
                return Err(Error::Contract(format!(
                    "channel_norm {name} must have shape [{c}], got {:?}",
                    self.shape(p)
                )));
            }
        }
        let n = h * w;
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![0.0; c * n];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let plane = &xs[ch * n..(ch + 1) * n];
            let mean = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[ch] = inv;
            for i in 0..n {
                let xh = (plane[i] - mean) * inv;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = gs[ch] * xh + bs[ch];
            }
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(
            t,
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Concatenates `C_i×H×W` tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat needs at least one input".into()))?;
        let (_, h, w) = self.value(first).dims3()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (c, hx, wx) = self.value(x).dims3()?;
            if (hx, wx) != (h, w) {
                return Err(Error::Dimension {
                    op: "concat_channels",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            c_total += c;
            data.extend_from_slice(self.value(x).data());
        }
        let t = Tensor::new(vec![c_total, h, w], data)?;
        Ok(self.push(t, Op::Concat(xs.to_vec()), xs))
    }

    /// Boundary-weighted BCE plus weighted IoU on logits. `weights` must
    /// match `gt`; both are constants.
    pub fn structure_loss(&mut self, logits: Var, gt: &Tensor, weights: &[f64]) -> Result<Var> {
        if self.shape(logits) != gt.shape() || weights.len() != gt.numel() {
            return Err(Error::Dimension {
                op: "structure_loss",
                lhs: self.shape(logits).to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        let z = self.value(logits).data();
        let g = gt.data();
        let wsum: f64 = weights.iter().sum();
        let mut bce = 0.0;
        let mut inter = 0.0;
        let mut union = 0.0;
        for i in 0..z.len() {
            let zi = z[i];
            let p = kernels::sigmoid(zi);
            let l = zi.max(0.0) - zi * g[i] + (-zi.abs()).exp().ln_1p();
            bce += weights[i] * l;
            inter += weights[i] * p * g[i];
            union += weights[i] * (p + g[i] - p * g[i]);
        }
        let loss = bce / wsum + 1.0 - (inter + 1.0) / (union + 1.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::StructureLoss {
                logits,
                gt: g.to_vec(),
                weights: weights.to_vec(),
            },
            &[logits],
        ))
    }

    /// `1 − (TP+1)/(TP + a·FP + b·FN + 1)` on probabilities.
    pub fn tversky(&mut self, prob: Var, gt: &Tensor, a: f64, b: f64) -> Result<Var> {
        if self.shape(prob) != gt.shape() {
            return Err(Error::Dimension {
                op: "tversky",
                lhs: self.shape(prob).to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        let (tp, fp, fneg) = tversky_counts(self.value(prob).data(), gt.data());
        let loss = 1.0 - (tp + 1.0) / (tp + a * fp + b * fneg + 1.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Tversky {
                prob,
                gt: gt.data().to_vec(),
                a,
                b,
            },
            &[prob],
        ))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every
    /// node that requires them.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Contract("backward on a forward-only graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
                continue;
            }
            let corrupt = self.fault == Some(node.op.kind());
            let last = node.op.operands().last().copied();
            for (var, mut gin) in self.backward_node(node, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if corrupt && Some(var) == last {
                    gin.iter_mut().for_each(|v| *v *= 1.5);
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&gin).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gin),
                }
            }
        }
        Ok(Gradients {
            grads: leaves,
            params: self.params.clone(),
        })
    }

    /// Runs [`Graph::gradients`] and adds parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (&id, &var) in &self.params {
            if let Some(g) = grads.get(var) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(grads)
    }

    fn backward_node(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut out = Vec::new();
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g, val(*b), m, n, k, &mut ga);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn_acc(val(*a), g, k, m, n, &mut gb);
                    out.push((*b, gb));
                }
                out
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                vec![(*a, kernels::transpose(g, c, r))]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(val(*x), val(*w), g, geom);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Resize(x) => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                vec![(*x, kernels::bilinear_resize_backward(g, c, h, w, oh, ow))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddN(xs) => xs.iter().map(|&x| (x, g.to_vec())).collect(),
            Op::ScaleByEntry { x, s, index } => {
                let k = val(*s)[*index];
                let gx = g.iter().map(|v| k * v).collect();
                let mut gs = vec![0.0; val(*s).len()];
                gs[*index] = g.iter().zip(val(*x)).map(|(a, b)| a * b).sum();
                vec![(*x, gx), (*s, gs)]
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(u, v)| u * v).collect();
                let gb = g.iter().zip(val(*a)).map(|(u, v)| u * v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| c * v).collect())],
            Op::Ln(x) => vec![(*x, g.iter().zip(val(*x)).map(|(u, v)| u / v).collect())],
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Silu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(u, &v)| {
                        let s = kernels::sigmoid(v);
                        u * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(u, y)| u * y * (1.0 - y))
                    .collect();
                vec![(*x, gx)]
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let gam = val(*gamma);
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let gr = &g[ch * n..(ch + 1) * n];
                    let xr = &xhat[ch * n..(ch + 1) * n];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for i in 0..n {
                        sum_g += gr[i];
                        sum_gx += gr[i] * xr[i];
                    }
                    gg[ch] = sum_gx;
                    gb[ch] = sum_g;
                    let scale = gam[ch] * inv_std[ch] / n as f64;
                    for i in 0..n {
                        gx[ch * n + i] = scale * (n as f64 * gr[i] - sum_g - xr[i] * sum_gx);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|&x| {
                        let len = val(x).len();
                        let part = g[offset..offset + len].to_vec();
                        offset += len;
                        (x, part)
                    })
                    .collect()
            }
            Op::StructureLoss {
                logits,
                gt,
                weights,
            } => {
                let z = val(*logits);
                let wsum: f64 = weights.iter().sum();
                let mut inter = 0.0;
                let mut union = 0.0;
                let p: Vec<f64> = z.iter().map(|&v| kernels::sigmoid(v)).collect();
                for i in 0..z.len() {
                    inter += weights[i] * p[i] * gt[i];
                    union += weights[i] * (p[i] + gt[i] - p[i] * gt[i]);
                }
                let (num, den) = (inter + 1.0, union + 1.0);
                let gz = (0..z.len())
                    .map(|i| {
                        let d_bce = weights[i] * (p[i] - gt[i]) / wsum;
                        let d_iou_dp = -weights[i] * (gt[i] * den - num * (1.0 - gt[i])) / (den * den);
                        g[0] * (d_bce + d_iou_dp * p[i] * (1.0 - p[i]))
                    })
                    .collect();
                vec![(*logits, gz)]
            }
            Op::Tversky { prob, gt, a, b } => {
                let p = val(*prob);
                let (tp, fp, fneg) = tversky_counts(p, gt);
                let num = tp + 1.0;
                let den = tp + a * fp + b * fneg + 1.0;
                let gp = gt
                    .iter()
                    .map(|&gi| {
                        let d_den = gi + a * (1.0 - gi) - b * gi;
                        -g[0] * (gi * den - num * d_den) / (den * den)
                    })
                    .collect();
                vec![(*prob, gp)]
            }
        }
    }
}

fn tversky_counts(p: &[f64], g: &[f64]) -> (f64, f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fneg = 0.0;
    for (&pi, &gi) in p.iter().zip(g) {
        tp += pi * gi;
        fp += pi * (1.0 - gi);
        fneg += (1.0 - pi) * gi;
    }
    (tp, fp, fneg)
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }
}
