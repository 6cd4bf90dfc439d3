//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs, so the tape is topologically ordered by construction.
//! [`Tape::backward`] walks it once in reverse.

use std::collections::HashMap;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Var, Var, usize),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    RepeatRows(Var),
    RepeatCols(Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    Pick(Var, Vec<(usize, usize)>),
    PairwiseSqDist(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Logistic function clamped to the open interval (0, 1).
pub fn sigmoid_value(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records `id` as a leaf. Repeated calls return the same handle, so a
    /// parameter used in several places receives the sum of its gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), !store.is_frozen(id));
        self.param_leaves.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), f)
            .expect("checked shapes");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid_value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = softmax_along(self.value(a), axis, false)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = softmax_along(self.value(a), axis, true)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a, axis), rg))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", sa, sb));
        }
        let (outer, na, inner) = axis_extents(sa, axis);
        let nb = sb[axis];
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for o in 0..outer {
            data.extend_from_slice(&ta[o * na * inner..(o + 1) * na * inner]);
            data.extend_from_slice(&tb[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = sa.to_vec();
        shape[axis] = na + nb;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b, axis), rg))
    }

    /// Sum of all elements, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Per-row sums of an `m×n` matrix, as `m×1`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape("row_sums", t.shape(), &[]));
        }
        let sums: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let value = Tensor::column(&sums);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::RowSums(a), rg))
    }

    pub fn row_means(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).cols() as f64;
        let s = self.row_sums(a)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Stacks a `1×n` row `k` times into `k×n`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.rows() != 1 || k == 0 {
            return Err(Error::shape("repeat_rows", t.shape(), &[k]));
        }
        let data = t.data().repeat(k);
        let value = Tensor::new([k, t.cols()], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::RepeatRows(a), rg))
    }

    /// Widens an `m×1` column to `m×k` by repeating each entry across the row.
    pub fn repeat_cols(&mut self, a: Var, k: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.cols() != 1 || k == 0 {
            return Err(Error::shape("repeat_cols", t.shape(), &[k]));
        }
        let data = t
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, k))
            .collect();
        let value = Tensor::new([t.rows(), k], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::RepeatCols(a), rg))
    }

    /// Selects rows of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(Error::shape("gather_rows", t.shape(), &[ids.len()]));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::InvalidItem {
                    item: i,
                    size: rows,
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::new([ids.len(), cols], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || start >= end || end > t.rows() {
            return Err(Error::shape("slice_rows", t.shape(), &[start, end]));
        }
        let c = t.cols();
        let value = Tensor::new([end - start, c], t.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    /// Picks individual matrix entries into a `k×1` column.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || at.is_empty() {
            return Err(Error::shape("pick", t.shape(), &[at.len()]));
        }
        if let Some(&(r, c)) = at.iter().find(|&&(r, c)| r >= t.rows() || c >= t.cols()) {
            return Err(Error::shape("pick", t.shape(), &[r, c]));
        }
        let vals: Vec<f64> = at.iter().map(|&(r, c)| t.get(r, c)).collect();
        let value = Tensor::column(&vals);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Pick(a, at.to_vec()), rg))
    }

    /// Matrix of squared Euclidean distances between the rows of `a` (n×d)
    /// and the rows of `b` (m×d).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.cols() {
            return Err(Error::shape("pairwise_sq_dist", ta.shape(), tb.shape()));
        }
        let (n, m) = (ta.rows(), tb.rows());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let x = ta.row_slice(i);
            for j in 0..m {
                let y = tb.row_slice(j);
                data.push(x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum());
            }
        }
        let value = Tensor::new([n, m], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::PairwiseSqDist(a, b), rg))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns the gradient of every node that requires one. Parameter
    /// accumulators are untouched; pass the result to
    /// [`ParamStore::accumulate`] to add it in.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        let mut params: Vec<(ParamId, Var)> =
            self.param_leaves.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let out = &node.value;

        // Accumulates into the gradient slot of `v`, allocating it on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };

        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                acc(a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
            }),
            Op::AddScalar(a) => acc(a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Exp(a) => acc(a, &mut |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s += g * y;
                }
            }),
            Op::Ln(a) => acc(a, &mut |s| {
                for ((s, g), x) in s.iter_mut().zip(g).zip(val(a).data()) {
                    *s += g / x;
                }
            }),
            Op::Powf(a, p) => acc(a, &mut |s| {
                for ((s, g), x) in s.iter_mut().zip(g).zip(val(a).data()) {
                    *s += g * p * x.powf(p - 1.0);
                }
            }),
            Op::Sigmoid(a) => acc(a, &mut |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s += g * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(a, &mut |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s += g * (1.0 - y * y);
                }
            }),
            Op::Gelu(a) => acc(a, &mut |s| {
                for ((s, g), x) in s.iter_mut().zip(g).zip(val(a).data()) {
                    *s += g * gelu_grad(*x);
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(a, &mut |s| matmul_bt_into(g, tb.data(), s, m, n, k));
                acc(b, &mut |s| matmul_at_into(ta.data(), g, s, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (out.rows(), out.cols());
                acc(a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_extents(out.shape(), axis);
                let y = out.data();
                acc(a, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                s[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_extents(out.shape(), axis);
                let y = out.data();
                acc(a, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let total: f64 = (0..len).map(|k| g[idx(k)]).sum();
                            for k in 0..len {
                                s[idx(k)] += g[idx(k)] - y[idx(k)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b, axis) => {
                let (outer, _, inner) = axis_extents(out.shape(), axis);
                let na = val(a).shape()[axis] * inner;
                let nb = val(b).shape()[axis] * inner;
                acc(a, &mut |s| {
                    for o in 0..outer {
                        let src = &g[o * (na + nb)..o * (na + nb) + na];
                        s[o * na..(o + 1) * na]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, g)| *s += g);
                    }
                });
                acc(b, &mut |s| {
                    for o in 0..outer {
                        let src = &g[o * (na + nb) + na..(o + 1) * (na + nb)];
                        s[o * nb..(o + 1) * nb]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Sum(a) => acc(a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = val(a).numel() as f64;
                acc(a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::RowSums(a) => {
                let c = val(a).cols();
                acc(a, &mut |s| {
                    for (r, row) in s.chunks_mut(c).enumerate() {
                        row.iter_mut().for_each(|s| *s += g[r]);
                    }
                });
            }
            Op::RepeatRows(a) => {
                let c = out.cols();
                acc(a, &mut |s| {
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::RepeatCols(a) => {
                let k = out.cols();
                acc(a, &mut |s| {
                    for (s, row) in s.iter_mut().zip(g.chunks(k)) {
                        *s += row.iter().sum::<f64>();
                    }
                });
            }
            Op::GatherRows(table, ref ids) => {
                let c = out.cols();
                acc(table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * c..(r + 1) * c];
                        s[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                acc(a, &mut |s| {
                    s[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, g)| *s += g);
                });
            }
            Op::Pick(a, ref at) => {
                let c = val(a).cols();
                acc(a, &mut |s| {
                    for (&(r, col), g) in at.iter().zip(g) {
                        s[r * c + col] += g;
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (n, m, d) = (ta.rows(), tb.rows(), ta.cols());
                let want_a = rg(a);
                let want_b = rg(b);
                let mut ga = vec![0.0; if want_a { n * d } else { 0 }];
                let mut gb = vec![0.0; if want_b { m * d } else { 0 }];
                for i in 0..n {
                    let x = ta.row_slice(i);
                    for j in 0..m {
                        let w = 2.0 * g[i * m + j];
                        if w == 0.0 {
                            continue;
                        }
                        let y = tb.row_slice(j);
                        for k in 0..d {
                            let diff = w * (x[k] - y[k]);
                            if want_a {
                                ga[i * d + k] += diff;
                            }
                            if want_b {
                                gb[j * d + k] -= diff;
                            }
                        }
                    }
                }
                acc(a, &mut |s| s.iter_mut().zip(&ga).for_each(|(s, g)| *s += g));
                acc(b, &mut |s| s.iter_mut().zip(&gb).for_each(|(s, g)| *s += g));
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not require one
    /// or is not reachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of the trainable parameters recorded on the tape, in
    /// parameter-id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|&&(p, _)| p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }
}

/// Softmax (or log-softmax) of `t` along `axis`.
pub fn softmax_along(t: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::shape("softmax", t.shape(), &[axis]));
    }
    let (outer, len, inner) = axis_extents(t.shape(), axis);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len)
                .map(|k| x[idx(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|k| (x[idx(k)] - max).exp()).sum();
            for k in 0..len {
                out[idx(k)] = if log {
                    x[idx(k)] - max - z.ln()
                } else {
                    (x[idx(k)] - max).exp() / z
                };
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.leaf(Tensor::scalar(5.0), true);
        let z = tape.mul(x, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 5.0);
        assert_eq!(g.wrt(y).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_violation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_uniform_and_shifted() {
        let t = Tensor::row(&[0.0, 0.0, 0.0]);
        let s = softmax_along(&t, 1, false).unwrap();
        assert!(s.data().iter().all(|&v| close(v, 1.0 / 3.0, 1e-15)));

        let t = Tensor::row(&[1000.0, 1000.0]);
        let s = softmax_along(&t, 1, false).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let t = Tensor::row(&[1.0, 2.0, 3.0]);
        let s = softmax_along(&t, 1, false).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!(close(s.data()[k], v.exp() / z, 1e-12));
        }
    }

    #[test]
    fn softmax_along_columns() {
        let t = Tensor::from_rows(&[[0.0, 5.0], [0.0, -5.0]]).unwrap();
        let s = softmax_along(&t, 0, false).unwrap();
        assert!(close(s.get(0, 0), 0.5, 1e-15));
        assert!(close(s.get(0, 1) + s.get(1, 1), 1.0, 1e-15));
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_value(0.0), 0.5);
        assert!(close(sigmoid_value(3f64.ln()), 0.75, 1e-15));
        let tiny = sigmoid_value(-800.0);
        assert!(tiny > 0.0 && tiny.is_finite());
        assert!(sigmoid_value(800.0) < 1.0);
    }

    #[test]
    fn concat_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new([1], vec![3.0]).unwrap());
        let c = tape.concat(a, b, 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::ones([2, 2]));
        let c = tape.concat(a, b, 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        assert_eq!(tape.value(c).row_slice(1), &[0.0, 0.0, 0.0, 1.0, 1.0]);

        let bad = tape.constant(Tensor::ones([3, 2]));
        assert!(tape.concat(a, bad, 1).is_err());
    }

    #[test]
    fn concat_sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros([2, 3]), true);
        let b = tape.leaf(Tensor::zeros([2, 2]), true);
        let c = tape.concat(a, b, 1).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.wrt(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(2.0)).unwrap();
        let f = store.register("f", Tensor::scalar(3.0)).unwrap();
        store.set_frozen(f, true);
        let mut tape = Tape::new();
        let vw = tape.param(&store, w);
        let vf = tape.param(&store, f);
        let y = tape.mul(vw, vf).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param(w).unwrap().item(), 3.0);
        assert!(g.param(f).is_none());
    }

    #[test]
    fn repeated_backward_accumulates_and_zero_grad_resets() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let y = tape.mul(v, v).unwrap();
        let g = tape.backward(y).unwrap();
        store.accumulate(&g);
        let g = tape.backward(y).unwrap();
        store.accumulate(&g);
        assert_eq!(store.grad(w).item(), 8.0);
        store.zero_grad();
        assert_eq!(store.grad(w).item(), 0.0);
    }

    #[test]
    fn inputs_are_not_mutated() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap(), true);
        let before = tape.value(a).clone();
        let b = tape.exp(a);
        let c = tape.softmax(b, 1).unwrap();
        let d = tape.mul(c, a).unwrap();
        let s = tape.sum(d);
        tape.backward(s).unwrap();
        assert_eq!(tape.value(a), &before);
    }
}
