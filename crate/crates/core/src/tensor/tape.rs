use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::value::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) id: usize,
    pub(crate) tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

/// Numerical events that were absorbed by clamping during the forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub degenerate_boxes: usize,
    pub clamped_depths: usize,
}

/// Kind of a recorded operation, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    Shift,
    Abs,
    Gelu,
    Sigmoid,
    Sum,
    Mean,
    Reshape,
    Transpose,
    Narrow,
    Concat,
    Gather,
    LayerNorm,
    Softmax,
    ConvTranspose2d,
    BilinearSample,
    RoiGrid,
    SinusoidalEmbed,
    MsDeformAttn,
    Rodrigues,
    ForwardKinematics,
    Lbs,
    Project,
}

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        s: f64,
    },
    Shift(usize),
    Abs(usize),
    Gelu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Transpose(usize),
    Narrow {
        x: usize,
        outer: usize,
        inner: usize,
        len_in: usize,
        start: usize,
        len: usize,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    ConvTranspose2d(super::spatial::ConvTransposeSaved),
    BilinearSample {
        map: usize,
        points: usize,
    },
    RoiGrid(super::spatial::RoiGridSaved),
    SinusoidalEmbed {
        points: usize,
        dim: usize,
    },
    MsDeformAttn(super::deform::DeformSaved),
    Rodrigues(usize),
    ForwardKinematics {
        rest: usize,
        rots: usize,
        parents: Arc<[usize]>,
    },
    Lbs {
        verts: usize,
        transforms: usize,
        rest: usize,
        weights: Arc<Tensor>,
    },
    Project {
        x: usize,
        fx: f64,
        fy: f64,
        offset: [f64; 3],
        clamped: Vec<bool>,
    },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Scale { .. } => OpKind::Scale,
            Op::Shift(..) => OpKind::Shift,
            Op::Abs(..) => OpKind::Abs,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::ConvTranspose2d(..) => OpKind::ConvTranspose2d,
            Op::BilinearSample { .. } => OpKind::BilinearSample,
            Op::RoiGrid(..) => OpKind::RoiGrid,
            Op::SinusoidalEmbed { .. } => OpKind::SinusoidalEmbed,
            Op::MsDeformAttn(..) => OpKind::MsDeformAttn,
            Op::Rodrigues(..) => OpKind::Rodrigues,
            Op::ForwardKinematics { .. } => OpKind::ForwardKinematics,
            Op::Lbs { .. } => OpKind::Lbs,
            Op::Project { .. } => OpKind::Project,
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Arc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Reverse-mode autodiff tape. Operations are appended in execution order,
/// so every node's inputs precede it.
pub struct Tape {
    id: u64,
    pub(crate) nodes: Vec<Node>,
    pub(crate) diagnostics: Diagnostics,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    requires: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`. `None` for constants; zeros for differentiable
    /// nodes that the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape || !self.requires[v.id] {
            return None;
        }
        Some(
            self.grads[v.id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone())),
        )
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape || !self.requires[v.id] {
            return None;
        }
        Some(
            self.grads[v.id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone())),
        )
    }
}

/// Accumulator handed to per-op backward rules.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
}

impl<'a> GradSink<'a> {
    /// Mutable gradient buffer for node `id`, or `None` if it needs no gradient.
    pub(crate) fn slot(&mut self, id: usize) -> Option<&mut [f64]> {
        let node = &self.nodes[id];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; n]))
    }

    pub(crate) fn value(&self, id: usize) -> &'a Tensor {
        let nodes: &'a [Node] = self.nodes;
        &nodes[id].value
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            diagnostics: Diagnostics::default(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    /// Corrupts the backward rule of every op of `kind` (gradients scaled
    /// by 1.5). Only meant for exercising the gradient checker.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value), true)
    }

    pub fn param_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value), false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        let lv = &self.nodes[root].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                if self.fault == Some(node.op.kind()) {
                    g.iter_mut().for_each(|v| *v *= 1.5);
                }
                let mut sink = GradSink {
                    grads: &mut grads[..i],
                    nodes: &self.nodes,
                };
                backward_op(node, &g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).unwrap()))
                .collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    // ---- elementwise and structural ops ----

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::new(va.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(ia, ib), &[ia, ib]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(ia, ib), &[ia, ib]))
    }

    /// `x[.., C] + bias[C]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (vx, vb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let c = vb.numel();
        if vx.shape().last() != Some(&c) {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(vb.data()).for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddBias { x: ix, bias: ib }, &[ix, ib]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Result<(usize, Tensor)> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?;
        Ok((ix, t))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let (ix, t) = self.unary(x, |a| a * s)?;
        Ok(self.push(t, Op::Scale { x: ix, s }, &[ix]))
    }

    /// `x + c` for a constant scalar `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        let (ix, t) = self.unary(x, |a| a + c)?;
        Ok(self.push(t, Op::Shift(ix), &[ix]))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let (ix, t) = self.unary(x, f64::abs)?;
        Ok(self.push(t, Op::Abs(ix), &[ix]))
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (ix, t) = self.unary(x, gelu_scalar)?;
        Ok(self.push(t, Op::Gelu(ix), &[ix]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (ix, t) = self.unary(x, sigmoid_scalar)?;
        Ok(self.push(t, Op::Sigmoid(ix), &[ix]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), &[ix]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(ix), &[ix]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let t = (*self.nodes[ix].value).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(ix), &[ix]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let &[r, c] = v.shape() else {
            return Err(Error::invalid("transpose", format!("expected 2-D, got {:?}", v.shape())));
        };
        let d = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(ix), &[ix]))
    }

    fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op,
                axis,
                shape: shape.to_vec(),
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let (outer, len_in, inner) = Self::axis_split("narrow", v.shape(), axis)?;
        if len == 0 || start + len > len_in {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} outside axis of length {len_in}", start + len),
            ));
        }
        let d = v.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * len_in + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Narrow {
                x: ix,
                outer,
                inner,
                len_in,
                start,
                len,
            },
            &[ix],
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let ids = xs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[ids[0]].value.shape().to_vec();
        let (outer, _, inner) = Self::axis_split("concat", &first, axis)?;
        let mut lens = Vec::with_capacity(ids.len());
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&i, &l) in ids.iter().zip(&lens) {
                let d = self.nodes[i].value.data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                xs: ids.clone(),
                outer,
                inner,
                lens,
            },
            &ids,
        ))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if let Some(&bad) = index.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::invalid("gather", format!("index {bad} out of range {}", v.numel())));
        }
        let out = index.iter().map(|&i| v.data()[i]).collect();
        let t = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(t, Op::Gather { x: ix, index }, &[ix]))
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: Option<&mut [f64]>, src: &[f64], s: f64) {
    if let Some(d) = dst {
        d.iter_mut().zip(src).for_each(|(d, g)| *d += s * g);
    }
}

fn backward_op(node: &Node, g: &[f64], sink: &mut GradSink<'_>) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => super::linalg::matmul_backward(*a, *b, *ta, *tb, g, sink),
        Op::Add(a, b) => {
            add_into(sink.slot(*a), g, 1.0);
            add_into(sink.slot(*b), g, 1.0);
        }
        Op::Sub(a, b) => {
            add_into(sink.slot(*a), g, 1.0);
            add_into(sink.slot(*b), g, -1.0);
        }
        Op::Mul(a, b) => {
            let vb = sink.value(*b).data();
            if let Some(d) = sink.slot(*a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                    *d += g * y;
                }
            }
            let va = sink.value(*a).data();
            if let Some(d) = sink.slot(*b) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                    *d += g * x;
                }
            }
        }
        Op::AddBias { x, bias } => {
            add_into(sink.slot(*x), g, 1.0);
            if let Some(d) = sink.slot(*bias) {
                let c = d.len();
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Scale { x, s } => add_into(sink.slot(*x), g, *s),
        Op::Shift(x) => add_into(sink.slot(*x), g, 1.0),
        Op::Abs(x) => {
            let vx = sink.value(*x).data();
            if let Some(d) = sink.slot(*x) {
                for ((d, g), v) in d.iter_mut().zip(g).zip(vx) {
                    if *v > 0.0 {
                        *d += g;
                    } else if *v < 0.0 {
                        *d -= g;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let vx = sink.value(*x).data();
            if let Some(d) = sink.slot(*x) {
                for ((d, g), v) in d.iter_mut().zip(g).zip(vx) {
                    *d += g * gelu_grad(*v);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(d) = sink.slot(*x) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = sink.slot(*x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(d) = sink.slot(*x) {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Reshape(x) => add_into(sink.slot(*x), g, 1.0),
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[1], out.shape()[0]);
            if let Some(d) = sink.slot(*x) {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Narrow {
            x,
            outer,
            inner,
            len_in,
            start,
            len,
        } => {
            if let Some(d) = sink.slot(*x) {
                for o in 0..*outer {
                    let base = (o * len_in + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    d[base..base + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Concat {
            xs,
            outer,
            inner,
            lens,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&i, &l) in xs.iter().zip(lens) {
                if let Some(d) = sink.slot(i) {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + l) * inner];
                        d[o * l * inner..(o + 1) * l * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, g)| *d += g);
                    }
                }
                offset += l;
            }
        }
        Op::Gather { x, index } => {
            if let Some(d) = sink.slot(*x) {
                for (&i, g) in index.iter().zip(g) {
                    d[i] += g;
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => super::nn::layer_norm_backward(*x, *gamma, *beta, xhat, inv_std, g, sink),
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => super::nn::softmax_backward(*x, *outer, *len, *inner, out.data(), g, sink),
        Op::ConvTranspose2d(saved) => saved.backward(g, sink),
        Op::BilinearSample { map, points } => super::spatial::bilinear_backward(*map, *points, g, sink),
        Op::RoiGrid(saved) => saved.backward(g, sink),
        Op::SinusoidalEmbed { points, dim } => super::spatial::sinusoid_backward(*points, *dim, g, sink),
        Op::MsDeformAttn(saved) => saved.backward(g, sink),
        Op::Rodrigues(aa) => super::geometry::rodrigues_backward(*aa, g, sink),
        Op::ForwardKinematics { rest, rots, parents } => {
            super::geometry::fk_backward(*rest, *rots, parents, out.data(), g, sink)
        }
        Op::Lbs {
            verts,
            transforms,
            rest,
            weights,
        } => super::geometry::lbs_backward(*verts, *transforms, *rest, weights, g, sink),
        Op::Project {
            x,
            fx,
            fy,
            offset,
            clamped,
        } => super::geometry::project_backward(*x, *fx, *fy, *offset, clamped, g, sink),
    }
}
