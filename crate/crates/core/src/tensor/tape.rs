//! Reverse-mode autodiff over a flat operation tape.
//!
//! Operations execute eagerly: each builder computes the output value with the
//! shared kernels and records a node whose backward rule distributes the
//! output gradient to its inputs. Nodes are appended in execution order, so
//! every input of node `t` was produced at some node `< t` and a single
//! reverse sweep populates gradients for every `requires_grad` leaf reachable
//! from the loss.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{
    gelu_grad_scalar, gelu_scalar, layer_norm_row, logsumexp_slice, softmax_strided, Tensor,
};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Reduction applied by [`Tape::cross_entropy_rows`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    /// `[r,c] + [c]` broadcast over rows.
    AddRowVec(VarId, VarId),
    /// `[r,c] + [r]` broadcast over columns.
    AddColVec(VarId, VarId),
    /// `[r,c] + const [c]`; the constant gets no gradient.
    AddConstRow(VarId),
    Matmul(VarId, VarId),
    Transpose(VarId),
    Reshape(VarId),
    SliceCols(VarId, usize, usize),
    ConcatCols(Vec<VarId>),
    ConcatRows(Vec<VarId>),
    GatherRows(VarId, Vec<usize>),
    GatherFlat(VarId, Vec<usize>),
    SumAll(VarId),
    SoftmaxRows(VarId),
    LogsumexpRows(VarId),
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: f64,
    },
    Gelu(VarId),
    Tanh(VarId),
    Sigmoid(VarId),
    Dropout(VarId, Vec<f64>),
    CrossEntropyRows {
        logits: VarId,
        targets: Vec<i64>,
        ignore: i64,
        reduction: Reduction,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Single-writer computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this variable.
    pub fn grad(&self, id: VarId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> VarId {
        self.push(value, false, op)
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "sub shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push_op(out, Op::Scale(x, c))
    }

    /// Adds vector `v` (shape `[c]`) to every row of `x` (shape `[r,c]`).
    pub fn add_row_vec(&mut self, x: VarId, v: VarId) -> Result<VarId> {
        let (xv, vv) = (self.value(x), self.value(v));
        if xv.rank() != 2 || vv.shape() != [xv.cols()] {
            return Err(Error::Shape(format!(
                "add_row_vec: x {:?} vs v {:?}",
                xv.shape(),
                vv.shape()
            )));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &val)| val + vv.data()[i % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::AddRowVec(x, v)))
    }

    /// Adds vector `v` (shape `[r]`) to every column of `x` (shape `[r,c]`):
    /// row `i` gets `v[i]`.
    pub fn add_col_vec(&mut self, x: VarId, v: VarId) -> Result<VarId> {
        let (xv, vv) = (self.value(x), self.value(v));
        if xv.rank() != 2 || vv.shape() != [xv.rows()] {
            return Err(Error::Shape(format!(
                "add_col_vec: x {:?} vs v {:?}",
                xv.shape(),
                vv.shape()
            )));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &val)| val + vv.data()[i / c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::AddColVec(x, v)))
    }

    /// Adds a constant row vector to every row; used for additive attention
    /// masks. The constant participates in no gradient.
    pub fn add_const_row(&mut self, x: VarId, row: &[f64]) -> Result<VarId> {
        let xv = self.value(x);
        if xv.rank() != 2 || row.len() != xv.cols() {
            return Err(Error::Shape(format!(
                "add_const_row: x {:?} vs const len {}",
                xv.shape(),
                row.len()
            )));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &val)| val + row[i % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::AddConstRow(x)))
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = super::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(out, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let out = super::transpose(self.value(x))?;
        Ok(self.push_op(out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                xv.shape(),
                shape
            )));
        }
        let out = Tensor::new(shape, xv.data().to_vec())?;
        Ok(self.push_op(out, Op::Reshape(x)))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let xv = self.value(x);
        xv_rank2(xv, "slice_cols")?;
        if start >= end || end > xv.cols() {
            return Err(Error::Shape(format!(
                "slice_cols [{start},{end}) invalid for {} cols",
                xv.cols()
            )));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&xv.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::matrix(r, end - start, data)?;
        Ok(self.push_op(out, Op::SliceCols(x, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        }
        let r = self.value(parts[0]).rows();
        let mut total_c = 0;
        for &p in parts {
            let pv = self.value(p);
            xv_rank2(pv, "concat_cols")?;
            if pv.rows() != r {
                return Err(Error::Shape("concat_cols row counts differ".into()));
            }
            total_c += pv.cols();
        }
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                let pv = self.value(p);
                let c = pv.cols();
                data.extend_from_slice(&pv.data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::matrix(r, total_c, data)?;
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero parts".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut total_r = 0;
        for &p in parts {
            let pv = self.value(p);
            xv_rank2(pv, "concat_rows")?;
            if pv.cols() != c {
                return Err(Error::Shape("concat_rows column counts differ".into()));
            }
            total_r += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::matrix(total_r, c, data)?;
        Ok(self.push_op(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows of `x` selected by index; repeats allowed (gradients accumulate).
    pub fn gather_rows(&mut self, x: VarId, indices: &[usize]) -> Result<VarId> {
        let xv = self.value(x);
        xv_rank2(xv, "gather_rows")?;
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Shape(format!("gather_rows index {i} >= {r}")));
            }
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        Ok(self.push_op(out, Op::GatherRows(x, indices.to_vec())))
    }

    /// Flat-offset gather producing a vector `[m]`; used for sparse lookups
    /// like CRF transition scores along a label path.
    pub fn gather_flat(&mut self, x: VarId, offsets: &[usize]) -> Result<VarId> {
        let xv = self.value(x);
        let n = xv.numel();
        let mut data = Vec::with_capacity(offsets.len());
        for &o in offsets {
            if o >= n {
                return Err(Error::Shape(format!("gather_flat offset {o} >= {n}")));
            }
            data.push(xv.data()[o]);
        }
        let out = Tensor::vector(data);
        Ok(self.push_op(out, Op::GatherFlat(x, offsets.to_vec())))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::SumAll(x))
    }

    // -- nonlinearities -----------------------------------------------------

    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.value(x);
        xv_rank2(xv, "softmax_rows")?;
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = xv.data().to_vec();
        for i in 0..r {
            softmax_strided(&mut data, i * c, c, 1);
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push_op(out, Op::SoftmaxRows(x)))
    }

    /// Per-row log-sum-exp of a `[r,c]` tensor, producing `[r]`.
    pub fn logsumexp_rows(&mut self, x: VarId) -> Result<VarId> {
        let xv = self.value(x);
        xv_rank2(xv, "logsumexp_rows")?;
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            data.push(logsumexp_slice(&xv.data()[i * c..(i + 1) * c]));
        }
        let out = Tensor::vector(data);
        Ok(self.push_op(out, Op::LogsumexpRows(x)))
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> Result<VarId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = *xv.shape().last().ok_or_else(|| Error::Shape("layer_norm on empty shape".into()))?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [{d}], got {:?}/{:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            layer_norm_row(row, gv.data(), bv.data(), eps);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let data = self.value(x).data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push_op(out, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push_op(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push_op(out, Op::Sigmoid(x))
    }

    /// Inverted dropout: keeps each element with probability `1-p`, scaling
    /// kept elements by `1/(1-p)`. Callers skip this op entirely in eval mode.
    pub fn dropout(&mut self, x: VarId, p: f64, rng: &mut ChaCha12Rng) -> Result<VarId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {p}")));
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Dropout(x, mask)))
    }

    /// Mean or sum of `-log softmax(logits)[target]` over rows whose target is
    /// not `ignore`; rows with the ignore sentinel contribute nothing.
    pub fn cross_entropy_rows(
        &mut self,
        logits: VarId,
        targets: &[i64],
        ignore: i64,
        reduction: Reduction,
    ) -> Result<VarId> {
        let lv = self.value(logits);
        xv_rank2(lv, "cross_entropy_rows")?;
        let (n, k) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy_rows got {} targets for {n} rows",
                targets.len()
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t < 0 || t as usize >= k {
                return Err(Error::Invalid(format!(
                    "cross_entropy_rows target {t} out of range for {k} classes (row {i})"
                )));
            }
            let row = &lv.data()[i * k..(i + 1) * k];
            total += logsumexp_slice(row) - row[t as usize];
            count += 1;
        }
        let value = match reduction {
            Reduction::Mean => {
                if count == 0 {
                    0.0
                } else {
                    total / count as f64
                }
            }
            Reduction::Sum => total,
        };
        Ok(self.push_op(
            Tensor::scalar(value),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                ignore,
                reduction,
            },
        ))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a `[1]`-shaped loss; populates `grad` for every
    /// node reachable from it.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            node.grad = match g {
                // Intermediate gradients are only scaffolding for the sweep;
                // retain them where a caller asked for them.
                Some(data) if node.requires_grad || idx == loss.0 => {
                    Some(Tensor::new(node.value.shape().to_vec(), data)?)
                }
                _ => None,
            };
        }
        Ok(())
    }

    /// Clears gradients so the tape can be reused for another backward pass.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn backprop_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut add_to = |id: VarId, f: &mut dyn FnMut(&mut [f64])| {
            let numel = self.nodes[id.0].value.numel();
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; numel]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(*a, &mut |g| accumulate(g, gout));
                add_to(*b, &mut |g| accumulate(g, gout));
            }
            Op::Sub(a, b) => {
                add_to(*a, &mut |g| accumulate(g, gout));
                add_to(*b, &mut |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                add_to(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                add_to(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                add_to(*x, &mut |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go * c;
                    }
                });
            }
            Op::AddRowVec(x, v) => {
                let c = self.nodes[v.0].value.numel();
                add_to(*x, &mut |g| accumulate(g, gout));
                add_to(*v, &mut |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i % c] += go;
                    }
                });
            }
            Op::AddColVec(x, v) => {
                let c = self.nodes[x.0].value.cols();
                add_to(*x, &mut |g| accumulate(g, gout));
                add_to(*v, &mut |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[i / c] += go;
                    }
                });
            }
            Op::AddConstRow(x) => {
                add_to(*x, &mut |g| accumulate(g, gout));
            }
            Op::Matmul(a, b) => {
                // da = gout @ b^T ; db = a^T @ gout
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k) = (av.rows(), av.cols());
                let nn = bv.cols();
                add_to(*a, &mut |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..nn {
                                acc += gout[i * nn + j] * bv.data()[p * nn + j];
                            }
                            g[i * k + p] += acc;
                        }
                    }
                });
                add_to(*b, &mut |g| {
                    for p in 0..k {
                        for j in 0..nn {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av.data()[i * k + p] * gout[i * nn + j];
                            }
                            g[p * nn + j] += acc;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = {
                    let v = &self.nodes[x.0].value;
                    (v.rows(), v.cols())
                };
                add_to(*x, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                add_to(*x, &mut |g| accumulate(g, gout));
            }
            Op::SliceCols(x, start, end) => {
                let c = self.nodes[x.0].value.cols();
                let w = end - start;
                add_to(*x, &mut |g| {
                    for (i, chunk) in gout.chunks(w).enumerate() {
                        for (j, &go) in chunk.iter().enumerate() {
                            g[i * c + start + j] += go;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total_c = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    let off = offset;
                    add_to(p, &mut |g| {
                        for i in 0..r {
                            for j in 0..pc {
                                g[i * pc + j] += gout[i * total_c + off + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    let off = offset;
                    add_to(p, &mut |g| {
                        accumulate(g, &gout[off..off + len]);
                    });
                    offset += len;
                }
            }
            Op::GatherRows(x, indices) => {
                let c = self.nodes[x.0].value.cols();
                add_to(*x, &mut |g| {
                    for (pos, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += gout[pos * c + j];
                        }
                    }
                });
            }
            Op::GatherFlat(x, offsets) => {
                add_to(*x, &mut |g| {
                    for (pos, &o) in offsets.iter().enumerate() {
                        g[o] += gout[pos];
                    }
                });
            }
            Op::SumAll(x) => {
                add_to(*x, &mut |g| {
                    for gi in g.iter_mut() {
                        *gi += gout[0];
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                add_to(*x, &mut |g| {
                    for (i, gy) in gout.chunks(c).enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += gy[j] * yr[j];
                        }
                        for j in 0..c {
                            g[i * c + j] += yr[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LogsumexpRows(x) => {
                let xv = &self.nodes[x.0].value;
                let (r, c) = (xv.rows(), xv.cols());
                let y = node.value.data();
                add_to(*x, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[i] * (xv.data()[i * c + j] - y[i]).exp();
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = self.nodes[gain.0].value.data();
                let d = *xv.shape().last().unwrap();
                let rows = xv.numel() / d;
                // Recompute per-row statistics; cheaper than storing them.
                let mut stats = Vec::with_capacity(rows);
                for i in 0..rows {
                    let row = &xv.data()[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    stats.push((mean, 1.0 / (var + eps).sqrt()));
                }
                add_to(*gain, &mut |g| {
                    for i in 0..rows {
                        let (mean, inv) = stats[i];
                        for j in 0..d {
                            let xhat = (xv.data()[i * d + j] - mean) * inv;
                            g[j] += gout[i * d + j] * xhat;
                        }
                    }
                });
                add_to(*bias, &mut |g| {
                    for i in 0..rows {
                        for j in 0..d {
                            g[j] += gout[i * d + j];
                        }
                    }
                });
                add_to(*x, &mut |g| {
                    for i in 0..rows {
                        let (mean, inv) = stats[i];
                        let row = &xv.data()[i * d..(i + 1) * d];
                        let gy = &gout[i * d..(i + 1) * d];
                        let mut mean_a = 0.0;
                        let mut mean_ax = 0.0;
                        for j in 0..d {
                            let a = gy[j] * gv[j];
                            let xhat = (row[j] - mean) * inv;
                            mean_a += a;
                            mean_ax += a * xhat;
                        }
                        mean_a /= d as f64;
                        mean_ax /= d as f64;
                        for j in 0..d {
                            let a = gy[j] * gv[j];
                            let xhat = (row[j] - mean) * inv;
                            g[i * d + j] += inv * (a - mean_a - xhat * mean_ax);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                add_to(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * gelu_grad_scalar(xv[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                add_to(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                add_to(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Dropout(x, mask) => {
                add_to(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * mask[i];
                    }
                });
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                ignore,
                reduction,
            } => {
                let lv = &self.nodes[logits.0].value;
                let (n, k) = (lv.rows(), lv.cols());
                let count = targets.iter().filter(|&&t| t != *ignore).count();
                let scale = match reduction {
                    Reduction::Mean => {
                        if count == 0 {
                            0.0
                        } else {
                            gout[0] / count as f64
                        }
                    }
                    Reduction::Sum => gout[0],
                };
                add_to(*logits, &mut |g| {
                    for i in 0..n {
                        let t = targets[i];
                        if t == *ignore {
                            continue;
                        }
                        let row = &lv.data()[i * k..(i + 1) * k];
                        let lse = logsumexp_slice(row);
                        for j in 0..k {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == t as usize { 1.0 } else { 0.0 };
                            g[i * k + j] += scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn xv_rank2(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!(
            "{what} expects rank-2, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
