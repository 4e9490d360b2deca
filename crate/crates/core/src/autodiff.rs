//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is the tape: every forward op appends a node holding its output
//! value and enough context to run its backward rule. Nodes are only ever
//! appended, so node order is a topological order and backward is a single
//! reverse sweep. A fresh graph is built for every forward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_offsets, broadcast_shape, gemm_acc, permute_data, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a [`Parameter`] inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// A named trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(name, "duplicate parameter name"));
        }
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        shared_rhs: bool,
        rows: usize,
        inner: usize,
        cols: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Select {
        a: Var,
        axis: usize,
        index: usize,
    },
    MeanAxis {
        a: Var,
        axis: usize,
    },
    ConcatLast(Var, Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The tape of recorded operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sum_grad_to(grad: &[f64], out_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if out_shape == target {
        return grad.to_vec();
    }
    let mut g = vec![0.0; target.iter().product()];
    for (i, off) in broadcast_offsets(out_shape, target).into_iter().enumerate() {
        g[off] += grad[i];
    }
    g
}

/// True when `small`, ignoring leading unit axes, equals the trailing axes of `full`.
fn is_trailing_block(full: &[usize], small: &[usize]) -> bool {
    let first = small.iter().position(|&d| d != 1).unwrap_or(small.len());
    let core = &small[first..];
    core.len() <= full.len() && full.ends_with(core)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded operations, leaves included.
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input. Constants receive no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter's current value into the graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`. `b` is either a shared `[k, n]` matrix or carries the
    /// same leading axes as `a`. The result is `[.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`matmul`](Self::matmul) but multiplies by the transpose of `b`,
    /// which is stored as `[n, k]` (or `[.., n, k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (rows, inner) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, cols) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != inner {
            return Err(mismatch());
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * rows * cols];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                let bs = if shared_rhs { 0 } else { bi * inner * cols };
                gemm_acc(
                    &ad[bi * rows * inner..(bi + 1) * rows * inner],
                    &bd[bs..bs + inner * cols],
                    &mut out[bi * rows * cols..(bi + 1) * rows * cols],
                    rows,
                    inner,
                    cols,
                    false,
                    trans_b,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([rows, cols]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                shared_rhs,
                rows,
                inner,
                cols,
            },
            "matmul",
        )
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else if ta.shape() == &shape[..] && is_trailing_block(&shape, tb.shape()) {
            let mut out = Vec::with_capacity(ta.numel());
            for row in ta.data().chunks_exact(tb.numel()) {
                out.extend(row.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
            }
            out
        } else if tb.shape() == &shape[..] && is_trailing_block(&shape, ta.shape()) {
            let mut out = Vec::with_capacity(tb.numel());
            for row in tb.data().chunks_exact(ta.numel()) {
                out.extend(ta.data().iter().zip(row).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            let oa = broadcast_offsets(&shape, ta.shape());
            let ob = broadcast_offsets(&shape, tb.shape());
            oa.iter()
                .zip(&ob)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        Ok(Tensor::from_parts(shape, data))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c), "scale")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a), "tanh")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, gelu);
        self.push(t, Op::Gelu(a), "gelu")
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().ok_or(Error::InvalidShape {
            shape: vec![],
            reason: "softmax needs rank >= 1".into(),
        })?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(t, Op::Softmax(a), "softmax")
    }

    /// Layer normalization over the last axis using population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().unwrap_or(&1);
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: tx.shape().to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normalized = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.numel() / n);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std.push(rstd);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rstd;
                normalized.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Gathers rows of a `[vocab, d]` table. `ids_shape` gives the leading
    /// shape of the result, which is `[..ids_shape, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                left: tt.shape().to_vec(),
                right: ids_shape.to_vec(),
            });
        }
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(
                "token id",
                format!("{bad} >= vocabulary size {vocab}"),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let t = Tensor::from_parts(shape, out);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Picks one index along `axis`, removing that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || index >= t.shape()[axis] {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("select index {index} on axis {axis}"),
            });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let len = t.shape()[axis];
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&t.data()[base..base + inner]);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::from_parts(shape, out);
        self.push(t, Op::Select { a, axis, index }, "select")
    }

    /// Mean along `axis`, removing that axis.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("mean over axis {axis}"),
            });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let len = t.shape()[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += t.data()[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::from_parts(shape, out);
        self.push(t, Op::MeanAxis { a, axis }, "mean_axis")
    }

    /// Concatenation along the last axis. Leading axes must match.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, rb) = (ta.rank(), tb.rank());
        if ra == 0 || ra != rb || ta.shape()[..ra - 1] != tb.shape()[..rb - 1] {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (na, nb) = (ta.shape()[ra - 1], tb.shape()[rb - 1]);
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for (x, y) in ta.data().chunks(na).zip(tb.data().chunks(nb)) {
            out.extend_from_slice(x);
            out.extend_from_slice(y);
        }
        let mut shape = ta.shape().to_vec();
        shape[ra - 1] = na + nb;
        let t = Tensor::from_parts(shape, out);
        self.push(t, Op::ConcatLast(a, b), "concat")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank()
            || perm
                .iter()
                .any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let (shape, data) = permute_data(t.data(), t.shape(), perm);
        let t = Tensor::from_parts(shape, data);
        self.push(
            t,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            "permute",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Mean cross-entropy of `[n, classes]` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let c = t.shape()[1];
        if targets.iter().any(|&y| y >= c) {
            return Err(Error::invalid(
                "target",
                format!("class id out of range for {c} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut loss = 0.0;
        for (row, &y) in t.data().chunks(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Runs the backward sweep from a scalar `loss` and writes the gradient of
    /// every bound parameter into `store`. Parameters not reachable from the
    /// loss end with a zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grad();
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                for (acc, v) in store.get_mut(*id).grad.data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every recorded node (`None` where
    /// the node does not influence the loss).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        }
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                shared_rhs,
                rows,
                inner,
                cols,
            } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for bi in 0..batch {
                    let bs = if shared_rhs { 0 } else { bi * inner * cols };
                    let gc = &g[bi * rows * cols..(bi + 1) * rows * cols];
                    let a_blk = &ad[bi * rows * inner..(bi + 1) * rows * inner];
                    let b_blk = &bd[bs..bs + inner * cols];
                    let ga_blk = &mut ga[bi * rows * inner..(bi + 1) * rows * inner];
                    // dA = dC · op(B)^T
                    gemm_acc(gc, b_blk, ga_blk, rows, cols, inner, false, !trans_b);
                    let gb_blk = &mut gb[bs..bs + inner * cols];
                    if trans_b {
                        // B is [cols, inner]: dB = dC^T · A
                        gemm_acc(gc, a_blk, gb_blk, cols, rows, inner, true, false);
                    } else {
                        // B is [inner, cols]: dB = A^T · dC
                        gemm_acc(a_blk, gc, gb_blk, inner, rows, cols, true, false);
                    }
                }
                acc(grads, a, ga);
                acc(grads, b, gb);
            }
            &Op::Add(a, b) => {
                acc(grads, a, sum_grad_to(g, out.shape(), self.shape(a)));
                acc(grads, b, sum_grad_to(g, out.shape(), self.shape(b)));
            }
            &Op::Sub(a, b) => {
                acc(grads, a, sum_grad_to(g, out.shape(), self.shape(a)));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(grads, b, sum_grad_to(&neg, out.shape(), self.shape(b)));
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let oa = broadcast_offsets(out.shape(), ta.shape());
                let ob = broadcast_offsets(out.shape(), tb.shape());
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                for i in 0..g.len() {
                    ga[oa[i]] += g[i] * tb.data()[ob[i]];
                    gb[ob[i]] += g[i] * ta.data()[oa[i]];
                }
                acc(grads, a, ga);
                acc(grads, b, gb);
            }
            &Op::Scale(a, c) => acc(grads, a, g.iter().map(|v| v * c).collect()),
            &Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                acc(grads, a, d);
            }
            &Op::Tanh(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                acc(grads, a, d);
            }
            &Op::Gelu(a) => {
                let x = self.value(a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                acc(grads, a, d);
            }
            &Op::Softmax(a) => {
                let n = *out.shape().last().unwrap();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(out.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, y)| y * (gv - dot)));
                }
                acc(grads, a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = *out.shape().last().unwrap();
                let gamma = self.value(*gain).data();
                let mut gx = Vec::with_capacity(g.len());
                let mut gg = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for ((gr, xr), &rstd) in g.chunks(n).zip(normalized.chunks(n)).zip(inv_std) {
                    let mut mean_gxh = 0.0;
                    let mut mean_gxh_xh = 0.0;
                    for j in 0..n {
                        let gxh = gr[j] * gamma[j];
                        mean_gxh += gxh;
                        mean_gxh_xh += gxh * xr[j];
                        gg[j] += gr[j] * xr[j];
                        gbias[j] += gr[j];
                    }
                    mean_gxh /= n as f64;
                    mean_gxh_xh /= n as f64;
                    for j in 0..n {
                        gx.push(rstd * (gr[j] * gamma[j] - mean_gxh - xr[j] * mean_gxh_xh));
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gain, gg);
                acc(grads, *bias, gbias);
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut gt = vec![0.0; t.numel()];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[k * d + j];
                    }
                }
                acc(grads, *table, gt);
            }
            &Op::Select { a, axis, index } => {
                let t = self.value(a);
                let outer: usize = t.shape()[..axis].iter().product();
                let inner: usize = t.shape()[axis + 1..].iter().product();
                let len = t.shape()[axis];
                let mut ga = vec![0.0; t.numel()];
                for o in 0..outer {
                    let base = (o * len + index) * inner;
                    ga[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                acc(grads, a, ga);
            }
            &Op::MeanAxis { a, axis } => {
                let t = self.value(a);
                let outer: usize = t.shape()[..axis].iter().product();
                let inner: usize = t.shape()[axis + 1..].iter().product();
                let len = t.shape()[axis];
                let mut ga = vec![0.0; t.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            ga[base + i] = g[o * inner + i] / len as f64;
                        }
                    }
                }
                acc(grads, a, ga);
            }
            &Op::ConcatLast(a, b) => {
                let na = *self.shape(a).last().unwrap();
                let nb = *self.shape(b).last().unwrap();
                let mut ga = Vec::with_capacity(self.value(a).numel());
                let mut gb = Vec::with_capacity(self.value(b).numel());
                for row in g.chunks(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                acc(grads, a, ga);
                acc(grads, b, gb);
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, d) = permute_data(g, out.shape(), &inverse);
                acc(grads, *a, d);
            }
            &Op::Reshape(a) => acc(grads, a, g.to_vec()),
            &Op::Sum(a) => acc(grads, a, vec![g[0]; self.value(a).numel()]),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / targets.len() as f64;
                let mut d = probs.clone();
                for (k, &y) in targets.iter().enumerate() {
                    d[k * c + y] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                acc(grads, *logits, d);
            }
        }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over all entries of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// False when any evaluation produced a non-finite value or failed.
    pub finite: bool,
    pub entries_checked: usize,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.finite && self.max_rel_error < tolerance
    }
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// with the given `step`, over every entry of every parameter in `store`.
///
/// `loss_fn` records a scalar loss on the supplied graph. It must be
/// deterministic. Parameter values in `store` are restored before returning;
/// gradients are left holding the analytic values.
pub fn check_gradient<F>(store: &mut ParamStore, step: f64, loss_fn: F) -> GradCheck
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_entries(store, step, usize::MAX, loss_fn)
}

/// Like [`check_gradient`] but visits at most `per_param` evenly spaced
/// entries of each parameter. Parameters no larger than that are checked in full.
pub fn check_gradient_sampled<F>(
    store: &mut ParamStore,
    step: f64,
    per_param: usize,
    loss_fn: F,
) -> GradCheck
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    assert!(per_param > 0, "need at least one entry per parameter");
    check_entries(store, step, per_param, loss_fn)
}

fn check_entries<F>(store: &mut ParamStore, step: f64, per_param: usize, loss_fn: F) -> GradCheck
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let failed = |entries| GradCheck {
        max_rel_error: f64::INFINITY,
        worst: None,
        finite: false,
        entries_checked: entries,
    };
    let eval = |store: &ParamStore| -> Option<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store).ok()?;
        g.value(loss).item().filter(|v| v.is_finite())
    };

    let mut g = Graph::new();
    let analytic_ok = loss_fn(&mut g, store).and_then(|loss| g.backward(loss, store));
    if analytic_ok.is_err() {
        return failed(0);
    }

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        finite: true,
        entries_checked: 0,
    };
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let numel = store.get(id).value.numel();
        let picks = numel.min(per_param);
        for j in 0..picks {
            // Offset by the parameter index so different tensors hit different columns.
            let k = if picks == numel {
                j
            } else {
                (j * numel / picks + pi) % numel
            };
            let original = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = original + step;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[k] = original - step;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[k] = original;
            let (Some(plus), Some(minus)) = (plus, minus) else {
                return failed(report.entries_checked);
            };
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = store.get(id).grad.data()[k];
            let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    report
}
