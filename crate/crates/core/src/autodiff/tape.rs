//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order because a node
//! can only reference nodes created before it.

use super::nn;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Transpose(usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    MaxAxis {
        x: usize,
        argmax: Vec<usize>,
    },
    Pick {
        x: usize,
        idx: Vec<usize>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LogSumExpRows(usize),
    Conv1d(nn::Conv1dSaved),
    Conv2d(nn::Conv2dSaved),
    AvgPool1d {
        x: usize,
        k: usize,
    },
    MaxPool1d {
        x: usize,
        argmax: Vec<usize>,
    },
    LstmCell(nn::LstmCellSaved),
    LstmSeq(nn::LstmSeqSaved),
    RoiAlign1d(nn::RoiAlignSaved),
    CrossEntropy(nn::CrossEntropySaved),
    BceWithLogits(nn::BceSaved),
    SmoothL1 {
        x: usize,
        target: Vec<f64>,
    },
    CrfNll(nn::CrfSaved),
}

/// Records operations for one forward/backward pass.
///
/// A tape is single-use: after [`Tape::backward`] the gradients are available
/// through [`Tape::grad`] and a second backward call is rejected.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the loss with respect to a leaf, once backward has run.
    /// Leaves the loss does not depend on report `None`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(v, Op::Div(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a.0, s), &[a.0])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x + s);
        self.push(v, Op::AddScalar(a.0), &[a.0])
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a.0), &[a.0])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::ln);
        self.push(v, Op::Log(a.0), &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square(a.0), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.len().max(1) as f64;
        let s = t.data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a.0), &[a.0]))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], out)?;
        Ok(self.push(v, Op::Transpose(a.0), &[a.0]))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() || start + len > t.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} range {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, dim, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Slice { x: a.0, axis, start }, &[a.0]))
    }

    /// Row `i` of a 2-D tensor as a 1-D tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let cols = self.shape(a)[1];
        let s = self.slice(a, 0, i, 1)?;
        self.reshape(s, &[cols])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let ref_shape = self.shape(*first).to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {ref_shape:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == ref_shape.len()
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", s, ref_shape),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&ref_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let d = t.shape()[axis];
                let base = o * d * inner;
                out.extend_from_slice(&t.data()[base..base + d * inner]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(v, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::shape("mean_axis", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, dim, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                let base = (o * dim + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += t.data()[base + i];
                }
            }
        }
        let inv = 1.0 / dim as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MeanAxis { x: a.0, axis }, &[a.0]))
    }

    /// Max over one axis; ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() || t.shape()[axis] == 0 {
            return Err(Error::shape("max_axis", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, dim, inner) = split_axis(t.shape(), axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                let base = (o * dim + j) * inner;
                for i in 0..inner {
                    let v = t.data()[base + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = base + i;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MaxAxis { x: a.0, argmax }, &[a.0]))
    }

    /// `out[n] = x[n, idx[n]]` for a 2-D `x`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 || t.shape()[0] != idx.len() || idx.iter().any(|&i| i >= t.shape()[1]) {
            return Err(Error::shape(
                "pick",
                format!("{:?} with {} indices", t.shape(), idx.len()),
            ));
        }
        let c = t.shape()[1];
        let out = idx
            .iter()
            .enumerate()
            .map(|(n, &i)| t.data()[n * c + i])
            .collect();
        let v = Tensor::from_vec(out);
        Ok(self.push(
            v,
            Op::Pick {
                x: a.0,
                idx: idx.to_vec(),
            },
            &[a.0],
        ))
    }

    /// Selects rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 || rows.iter().any(|&r| r >= t.shape()[0]) {
            return Err(Error::shape("gather_rows", format!("{:?}", t.shape())));
        }
        let c = t.shape()[1];
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
        }
        let v = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x: a.0,
                rows: rows.to_vec(),
            },
            &[a.0],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data()[i * k + p];
                let brow = &tb.data()[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(Error::shape("softmax", format!("{:?}", t.shape())));
        }
        let c = t.shape()[1];
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(v, Op::SoftmaxRows(a.0), &[a.0]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(Error::shape("log_softmax", format!("{:?}", t.shape())));
        }
        let c = t.shape()[1];
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let l = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= l);
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(v, Op::LogSoftmaxRows(a.0), &[a.0]))
    }

    /// Row-wise log-sum-exp of a 2-D tensor, giving one value per row.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(Error::shape("log_sum_exp", format!("{:?}", t.shape())));
        }
        let c = t.shape()[1];
        let out = t.data().chunks(c).map(log_sum_exp).collect();
        let v = Tensor::from_vec(out);
        Ok(self.push(v, Op::LogSumExpRows(a.0), &[a.0]))
    }

    /// Sum of smooth-L1 (beta = 1) penalties between `a` and a fixed target.
    pub fn smooth_l1(&mut self, a: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if t.len() != target.len() {
            return Err(Error::shape(
                "smooth_l1",
                format!("{} values vs {} targets", t.len(), target.len()),
            ));
        }
        let s = t
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &y)| {
                let d = (x - y).abs();
                if d < 1.0 {
                    0.5 * d * d
                } else {
                    d - 0.5
                }
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::SmoothL1 {
                x: a.0,
                target: target.to_vec(),
            },
            &[a.0],
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; build a new tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let gd = g.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    axpy(d, gd, 1.0);
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    axpy(d, gd, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    axpy(d, gd, 1.0);
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    axpy(d, gd, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(d) = acc(grads, nodes, *a) {
                    for k in 0..d.len() {
                        d[k] += gd[k] * vb[k];
                    }
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    for k in 0..d.len() {
                        d[k] += gd[k] * va[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(d) = acc(grads, nodes, *a) {
                    for k in 0..d.len() {
                        d[k] += gd[k] / vb[k];
                    }
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    for k in 0..d.len() {
                        d[k] -= gd[k] * va[k] / (vb[k] * vb[k]);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    axpy(d, gd, *s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    axpy(d, gd, 1.0);
                }
            }
            Op::Relu(a) => {
                let va = nodes[*a].value.data();
                if let Some(d) = acc(grads, nodes, *a) {
                    for k in 0..d.len() {
                        if va[k] > 0.0 {
                            d[k] += gd[k];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    for k in 0..d.len() {
                        d[k] += gd[k] * out[k] * (1.0 - out[k]);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    for k in 0..d.len() {
                        d[k] += gd[k] * (1.0 - out[k] * out[k]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    for k in 0..d.len() {
                        d[k] += gd[k] * out[k];
                    }
                }
            }
            Op::Log(a) => {
                let va = nodes[*a].value.data();
                if let Some(d) = acc(grads, nodes, *a) {
                    for k in 0..d.len() {
                        d[k] += gd[k] / va[k];
                    }
                }
            }
            Op::Square(a) => {
                let va = nodes[*a].value.data();
                if let Some(d) = acc(grads, nodes, *a) {
                    for k in 0..d.len() {
                        d[k] += 2.0 * gd[k] * va[k];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    d.iter_mut().for_each(|v| *v += gd[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    let s = gd[0] / d.len().max(1) as f64;
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Transpose(a) => {
                let shape = nodes[*a].value.shape();
                let (r, c) = (shape[0], shape[1]);
                if let Some(d) = acc(grads, nodes, *a) {
                    for ii in 0..r {
                        for j in 0..c {
                            d[ii * c + j] += gd[j * r + ii];
                        }
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = nodes[*x].value.shape().to_vec();
                let len = nodes[i].value.shape()[*axis];
                let (outer, dim, inner) = split_axis(&xs, *axis);
                if let Some(d) = acc(grads, nodes, *x) {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        axpy(&mut d[base..base + len * inner], src, 1.0);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let dp = nodes[p].value.shape()[*axis];
                    if let Some(d) = acc(grads, nodes, p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            axpy(
                                &mut d[o * dp * inner..(o + 1) * dp * inner],
                                &gd[src..src + dp * inner],
                                1.0,
                            );
                        }
                    }
                    offset += dp;
                }
            }
            Op::MeanAxis { x, axis } => {
                let xs = nodes[*x].value.shape().to_vec();
                let (outer, dim, inner) = split_axis(&xs, *axis);
                if let Some(d) = acc(grads, nodes, *x) {
                    let inv = 1.0 / dim as f64;
                    for o in 0..outer {
                        for j in 0..dim {
                            let base = (o * dim + j) * inner;
                            for ii in 0..inner {
                                d[base + ii] += gd[o * inner + ii] * inv;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, argmax } => {
                if let Some(d) = acc(grads, nodes, *x) {
                    for (k, &src) in argmax.iter().enumerate() {
                        d[src] += gd[k];
                    }
                }
            }
            Op::Pick { x, idx } => {
                let c = nodes[*x].value.shape()[1];
                if let Some(d) = acc(grads, nodes, *x) {
                    for (n, &j) in idx.iter().enumerate() {
                        d[n * c + j] += gd[n];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let c = nodes[*x].value.shape()[1];
                if let Some(d) = acc(grads, nodes, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(&mut d[r * c..(r + 1) * c], &gd[k * c..(k + 1) * c], 1.0);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(d) = acc(grads, nodes, *a) {
                    for ii in 0..m {
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            let grow = &gd[ii * n..(ii + 1) * n];
                            d[ii * k + p] += brow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    for ii in 0..m {
                        for p in 0..k {
                            let av = ta.data()[ii * k + p];
                            let grow = &gd[ii * n..(ii + 1) * n];
                            axpy(&mut d[p * n..(p + 1) * n], grow, av);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => nn::linear_backward(nodes, grads, gd, *x, *w, *b),
            Op::SoftmaxRows(a) => {
                let c = nodes[i].value.shape()[1];
                if let Some(d) = acc(grads, nodes, *a) {
                    for ((drow, yrow), grow) in d.chunks_mut(c).zip(out.chunks(c)).zip(gd.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for k in 0..c {
                            drow[k] += yrow[k] * (grow[k] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let c = nodes[i].value.shape()[1];
                if let Some(d) = acc(grads, nodes, *a) {
                    for ((drow, yrow), grow) in d.chunks_mut(c).zip(out.chunks(c)).zip(gd.chunks(c)) {
                        let gsum: f64 = grow.iter().sum();
                        for k in 0..c {
                            drow[k] += grow[k] - yrow[k].exp() * gsum;
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let xa = &nodes[*a].value;
                let c = xa.shape()[1];
                if let Some(d) = acc(grads, nodes, *a) {
                    for (n, (drow, xrow)) in d.chunks_mut(c).zip(xa.data().chunks(c)).enumerate() {
                        for k in 0..c {
                            drow[k] += gd[n] * (xrow[k] - out[n]).exp();
                        }
                    }
                }
            }
            Op::Conv1d(s) => nn::conv1d_backward(nodes, grads, gd, s),
            Op::Conv2d(s) => nn::conv2d_backward(nodes, grads, gd, s),
            Op::AvgPool1d { x, k } => {
                let inv = 1.0 / *k as f64;
                if let Some(d) = acc(grads, nodes, *x) {
                    for (j, &gv) in gd.iter().enumerate() {
                        for t in 0..*k {
                            d[j * k + t] += gv * inv;
                        }
                    }
                }
            }
            Op::MaxPool1d { x, argmax } => {
                if let Some(d) = acc(grads, nodes, *x) {
                    for (j, &src) in argmax.iter().enumerate() {
                        d[src] += gd[j];
                    }
                }
            }
            Op::LstmCell(s) => nn::lstm_cell_backward(nodes, grads, gd, s),
            Op::LstmSeq(s) => nn::lstm_seq_backward(nodes, grads, gd, s),
            Op::RoiAlign1d(s) => nn::roi_align_backward(nodes, grads, gd, s),
            Op::CrossEntropy(s) => nn::cross_entropy_backward(nodes, grads, gd[0], s),
            Op::BceWithLogits(s) => nn::bce_backward(nodes, grads, gd[0], s),
            Op::SmoothL1 { x, target } => {
                let vx = nodes[*x].value.data();
                if let Some(d) = acc(grads, nodes, *x) {
                    for k in 0..d.len() {
                        let diff = vx[k] - target[k];
                        let gk = if diff.abs() < 1.0 { diff } else { diff.signum() };
                        d[k] += gd[0] * gk;
                    }
                }
            }
            Op::CrfNll(s) => nn::crf_backward(nodes, grads, gd[0], s),
        }
    }
}

/// Gradient buffer for node `id`, created on first use; `None` for nodes that
/// do not require gradients.
pub(crate) fn acc<'a>(
    grads: &'a mut [Option<Tensor>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape()));
    }
    slot.as_mut().map(|t| t.data_mut())
}

pub(crate) fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// `(outer, dim, inner)` factorisation of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
