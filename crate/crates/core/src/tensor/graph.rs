//! Define-by-run tape. Every op evaluates eagerly and records what backward
//! needs; `backward` walks the tape once in reverse.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::{sigmoid, Tensor, PROB_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Prelu(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    SegmentMean(Var, Rc<[usize]>, Vec<usize>),
    SegmentMax(Var, Vec<Option<usize>>),
    SegmentSoftmax(Var, Rc<[usize]>),
    Reshape(Var),
    RowDot(Var, Var),
    RowOuter(Var, Var),
    Mask(Var, Rc<[f64]>),
    Normalize(Var, f64),
    Sum(Var),
    SumSquares(Var),
    BceLogits {
        logit: Var,
        labels: Rc<[f64]>,
        weights: Rc<[f64]>,
    },
    Bce {
        pred: Var,
        labels: Rc<[f64]>,
        weights: Rc<[f64]>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Reverse-mode tape over [`Tensor`] values.
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    verify: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            verify: cfg!(debug_assertions),
        }
    }

    /// Check every op output for NaN/Inf and fail with `Error::Numeric`.
    pub fn with_verify(mut self, on: bool) -> Self {
        self.verify = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters read by this graph, in id order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.param_vars.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.verify && !value.all_finite() {
            return Err(Error::Numeric(format!("non-finite output from {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding a copy of a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            requires_grad: store.is_trainable(id),
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape_str(&self, v: Var) -> String {
        format!("{:?}", self.nodes[v.0].value.shape())
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::shape(
            op,
            format!(
                "left operand {} vs right operand {}",
                self.shape_str(a),
                self.shape_str(b)
            ),
        )
    }

    // ---- arithmetic ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            n,
        );
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// `x [m, n] + bias [1, n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(bias).len() != n {
            return Err(self.mismatch("add_row", x, bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bb) in out[r * n..(r + 1) * n].iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("add_row", value, Op::AddRow(x, bias), &[x, bias])
    }

    /// `x [m, n] * c [m, 1]`: scales each row by its own coefficient.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(c).len() != m {
            return Err(self.mismatch("mul_col", x, c));
        }
        let cv = self.value(c).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for o in &mut out[r * n..(r + 1) * n] {
                *o *= cv[r];
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("mul_col", value, Op::MulCol(x, c), &[x, c])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let value = self.map(x, |v| v * k);
        self.push("scale", value, Op::Scale(x, k), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, f64::tanh);
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    /// PReLU with one slope per column (`slope` holds `n` values).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let a = self.value(slope).data().to_vec();
        if a.len() != n && a.len() != 1 {
            return Err(self.mismatch("prelu", x, slope));
        }
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for c in 0..n {
                let v = &mut out[r * n + c];
                if *v < 0.0 {
                    *v *= a[if a.len() == 1 { 0 } else { c }];
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("prelu", value, Op::Prelu(x, slope), &[x, slope])
    }

    // ---- structure -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no operands"));
        };
        let m = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no operands"));
        };
        let n = self.dims(first).1;
        for &p in parts {
            if self.dims(p).1 != n && !self.value(p).is_empty() {
                return Err(self.mismatch("concat_rows", first, p));
            }
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n.max(1);
        let value = Tensor::matrix(m, n, out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `out[i] = x[index[i]]` row-wise.
    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for operand {}", self.shape_str(x)),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::matrix(index.len(), n, out)?;
        self.push("gather_rows", value, Op::GatherRows(x, index), &[x])
    }

    /// `out[target[i]] += x[i]`, producing `rows` output rows.
    pub fn scatter_add_rows(&mut self, x: Var, target: Rc<[usize]>, rows: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if target.len() != m || target.iter().any(|&t| t >= rows) {
            return Err(Error::shape(
                "scatter_add_rows",
                format!(
                    "{} targets for operand {} into {rows} rows",
                    target.len(),
                    self.shape_str(x)
                ),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * n];
        for (i, &t) in target.iter().enumerate() {
            for c in 0..n {
                out[t * n + c] += src[i * n + c];
            }
        }
        let value = Tensor::matrix(rows, n, out)?;
        self.push("scatter_add_rows", value, Op::ScatterAddRows(x, target), &[x])
    }

    /// Mean of the rows assigned to each segment; empty segments give zeros.
    pub fn segment_mean(&mut self, x: Var, segment: Rc<[usize]>, segments: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if segment.len() != m || segment.iter().any(|&s| s >= segments) {
            return Err(Error::shape(
                "segment_mean",
                format!("{} segment ids for operand {}", segment.len(), self.shape_str(x)),
            ));
        }
        let src = self.value(x).data();
        let mut counts = vec![0usize; segments];
        let mut out = vec![0.0; segments * n];
        for (i, &s) in segment.iter().enumerate() {
            counts[s] += 1;
            for c in 0..n {
                out[s * n + c] += src[i * n + c];
            }
        }
        for (s, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let inv = 1.0 / cnt as f64;
                for o in &mut out[s * n..(s + 1) * n] {
                    *o *= inv;
                }
            }
        }
        let value = Tensor::matrix(segments, n, out)?;
        self.push("segment_mean", value, Op::SegmentMean(x, segment, counts), &[x])
    }

    /// Column-wise max over the rows of each segment; empty segments give
    /// zeros. Ties go to the earliest row.
    pub fn segment_max(&mut self, x: Var, segment: Rc<[usize]>, segments: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if segment.len() != m || segment.iter().any(|&s| s >= segments) {
            return Err(Error::shape(
                "segment_max",
                format!("{} segment ids for operand {}", segment.len(), self.shape_str(x)),
            ));
        }
        let src = self.value(x).data();
        let mut arg: Vec<Option<usize>> = vec![None; segments * n];
        for (i, &s) in segment.iter().enumerate() {
            for c in 0..n {
                let slot = &mut arg[s * n + c];
                match *slot {
                    Some(j) if src[j * n + c] >= src[i * n + c] => {}
                    _ => *slot = Some(i),
                }
            }
        }
        let out = arg
            .iter()
            .enumerate()
            .map(|(k, a)| a.map_or(0.0, |i| src[i * n + k % n]))
            .collect();
        let value = Tensor::matrix(segments, n, out)?;
        self.push("segment_max", value, Op::SegmentMax(x, arg), &[x])
    }

    /// Softmax of a column `[m, 1]` within each segment.
    pub fn segment_softmax(&mut self, x: Var, segment: Rc<[usize]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if n != 1 || segment.len() != m {
            return Err(Error::shape(
                "segment_softmax",
                format!("operand {} with {} segment ids", self.shape_str(x), segment.len()),
            ));
        }
        let src = self.value(x).data();
        let segments = segment.iter().copied().max().map_or(0, |s| s + 1);
        let mut peak = vec![f64::NEG_INFINITY; segments];
        for (i, &s) in segment.iter().enumerate() {
            peak[s] = peak[s].max(src[i]);
        }
        let mut denom = vec![0.0; segments];
        let mut out: Vec<f64> = segment
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let e = (src[i] - peak[s]).exp();
                denom[s] += e;
                e
            })
            .collect();
        for (o, &s) in out.iter_mut().zip(segment.iter()) {
            *o /= denom[s];
        }
        let value = Tensor::matrix(m, 1, out)?;
        self.push("segment_softmax", value, Op::SegmentSoftmax(x, segment), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())
            .map_err(|_| Error::shape("reshape", format!("operand {} to {shape:?}", self.shape_str(x))))?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Row-wise dot product `[m, n] x [m, n] -> [m, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (m, n) = self.dims(a);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = (0..m)
            .map(|r| (0..n).map(|c| av[r * n + c] * bv[r * n + c]).sum())
            .collect();
        let value = Tensor::matrix(m, 1, out)?;
        self.push("row_dot", value, Op::RowDot(a, b), &[a, b])
    }

    /// Row-wise flattened outer product `[m, p] x [m, q] -> [m, p*q]`.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims(a);
        let (m2, q) = self.dims(b);
        if m != m2 {
            return Err(self.mismatch("row_outer", a, b));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * p * q);
        for r in 0..m {
            for i in 0..p {
                for j in 0..q {
                    out.push(av[r * p + i] * bv[r * q + j]);
                }
            }
        }
        let value = Tensor::matrix(m, p * q, out)?;
        self.push("row_outer", value, Op::RowOuter(a, b), &[a, b])
    }

    /// Elementwise product with a constant mask (used by dropout).
    pub fn mask(&mut self, x: Var, mask: Rc<[f64]>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape(
                "mask",
                format!("mask of {} values for operand {}", mask.len(), self.shape_str(x)),
            ));
        }
        let av = self.value(x);
        let data = av.data().iter().zip(mask.iter()).map(|(v, k)| v * k).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mask", value, Op::Mask(x, mask), &[x])
    }

    /// `x / ||x||` over the whole tensor.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let norm = self.value(x).sum_squares().sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric("normalize of a zero vector".into()));
        }
        let value = self.map(x, |v| v / norm);
        self.push("normalize", value, Op::Normalize(x, norm), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_squares();
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// `sum_i w_i * bce(p_i, y_i)` with `p` clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce(&mut self, pred: Var, labels: Rc<[f64]>, weights: Rc<[f64]>) -> Result<Var> {
        let n = self.value(pred).len();
        if labels.len() != n || weights.len() != n {
            return Err(Error::shape(
                "bce",
                format!(
                    "prediction {} with {} labels and {} weights",
                    self.shape_str(pred),
                    labels.len(),
                    weights.len()
                ),
            ));
        }
        let p = self.value(pred).data();
        let total = (0..n).map(|i| weights[i] * super::bce(p[i], labels[i])).sum();
        self.push("bce", Tensor::scalar(total), Op::Bce { pred, labels, weights }, &[pred])
    }

    /// `sum_i w_i * bce(sigmoid(z_i), y_i)` computed from logits without
    /// clamping, so the gradient `w_i * (sigmoid(z_i) - y_i)` never vanishes.
    pub fn bce_logits(&mut self, logit: Var, labels: Rc<[f64]>, weights: Rc<[f64]>) -> Result<Var> {
        let n = self.value(logit).len();
        if labels.len() != n || weights.len() != n {
            return Err(Error::shape(
                "bce_logits",
                format!(
                    "logits {} with {} labels and {} weights",
                    self.shape_str(logit),
                    labels.len(),
                    weights.len()
                ),
            ));
        }
        let z = self.value(logit).data();
        let total = (0..n).map(|i| weights[i] * (softplus(z[i]) - labels[i] * z[i])).sum();
        self.push(
            "bce_logits",
            Tensor::scalar(total),
            Op::BceLogits { logit, labels, weights },
            &[logit],
        )
    }

    pub fn bce_logits_mean(&mut self, logit: Var, labels: &[f64]) -> Result<Var> {
        let n = labels.len().max(1);
        let w: Rc<[f64]> = vec![1.0 / n as f64; labels.len()].into();
        self.bce_logits(logit, labels.into(), w)
    }

    /// Mean binary cross-entropy over all predictions.
    pub fn bce_mean(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let n = labels.len().max(1);
        let w: Rc<[f64]> = vec![1.0 / n as f64; labels.len()].into();
        self.bce(pred, labels.into(), w)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` for every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", self.shape_str(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut by_param = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, &grads[i]) {
                if node.requires_grad {
                    by_param.insert(id, Tensor::new(node.value.shape().to_vec(), g.clone())?);
                }
            }
        }
        Ok(Gradients {
            per_node: grads,
            by_param,
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    // dA = dC * B^T
                    gemm(m, n, k, g, (n as isize, 1), val(*b).data(), (1, n as isize), ga, k);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    // dB = A^T * dC
                    gemm(k, m, n, val(*a).data(), (1, k as isize), g, (n as isize, 1), gb, n);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, wants(*a), g.iter().copied());
                accumulate(grads, *b, wants(*b), g.iter().copied());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, wants(*a), g.iter().copied());
                accumulate(grads, *b, wants(*b), g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                accumulate(grads, *a, wants(*a), g.iter().zip(bv).map(|(g, y)| g * y));
                accumulate(grads, *b, wants(*b), g.iter().zip(av).map(|(g, x)| g * x));
            }
            Op::AddRow(x, bias) => {
                accumulate(grads, *x, wants(*x), g.iter().copied());
                if wants(*bias) {
                    let n = val(*bias).len();
                    let gb = slot(grads, *bias, n);
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                }
            }
            Op::MulCol(x, c) => {
                let (m, n) = val(*x).dims2();
                let cv = val(*c).data();
                if wants(*x) {
                    let gx = slot(grads, *x, m * n);
                    for r in 0..m {
                        for k in 0..n {
                            gx[r * n + k] += g[r * n + k] * cv[r];
                        }
                    }
                }
                if wants(*c) {
                    let xv = val(*x).data();
                    let gc = slot(grads, *c, m);
                    for r in 0..m {
                        gc[r] += (0..n).map(|k| g[r * n + k] * xv[r * n + k]).sum::<f64>();
                    }
                }
            }
            Op::Scale(x, k) => accumulate(grads, *x, wants(*x), g.iter().map(|v| v * k)),
            Op::Sigmoid(x) => {
                let y = out.data();
                accumulate(grads, *x, wants(*x), g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)));
            }
            Op::Tanh(x) => {
                let y = out.data();
                accumulate(grads, *x, wants(*x), g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)));
            }
            Op::Prelu(x, slope) => {
                let (m, n) = val(*x).dims2();
                let xv = val(*x).data();
                let a = val(*slope).data();
                let ai = |c: usize| if a.len() == 1 { 0 } else { c };
                if wants(*x) {
                    let gx = slot(grads, *x, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            let k = r * n + c;
                            gx[k] += if xv[k] < 0.0 { g[k] * a[ai(c)] } else { g[k] };
                        }
                    }
                }
                if wants(*slope) {
                    let gs = slot(grads, *slope, a.len());
                    for r in 0..m {
                        for c in 0..n {
                            let k = r * n + c;
                            if xv[k] < 0.0 {
                                gs[ai(c)] += g[k] * xv[k];
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let n = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let gp = slot(grads, p, m * w);
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += g[r * n + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    accumulate(grads, p, wants(p), g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::GatherRows(x, index) => {
                if wants(*x) {
                    let (m, n) = val(*x).dims2();
                    let gx = slot(grads, *x, m * n);
                    for (i, &src) in index.iter().enumerate() {
                        for c in 0..n {
                            gx[src * n + c] += g[i * n + c];
                        }
                    }
                }
            }
            Op::ScatterAddRows(x, target) => {
                if wants(*x) {
                    let (m, n) = val(*x).dims2();
                    let gx = slot(grads, *x, m * n);
                    for (i, &t) in target.iter().enumerate() {
                        for c in 0..n {
                            gx[i * n + c] += g[t * n + c];
                        }
                    }
                }
            }
            Op::SegmentMean(x, segment, counts) => {
                if wants(*x) {
                    let (m, n) = val(*x).dims2();
                    let gx = slot(grads, *x, m * n);
                    for (i, &s) in segment.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        for c in 0..n {
                            gx[i * n + c] += g[s * n + c] * inv;
                        }
                    }
                }
            }
            Op::SegmentMax(x, arg) => {
                if wants(*x) {
                    let (m, n) = val(*x).dims2();
                    let gx = slot(grads, *x, m * n);
                    for (k, a) in arg.iter().enumerate() {
                        if let Some(i) = a {
                            gx[i * n + k % n] += g[k];
                        }
                    }
                }
            }
            Op::SegmentSoftmax(x, segment) => {
                if wants(*x) {
                    let y = out.data();
                    let segments = segment.iter().copied().max().map_or(0, |s| s + 1);
                    let mut dot = vec![0.0; segments];
                    for (i, &s) in segment.iter().enumerate() {
                        dot[s] += g[i] * y[i];
                    }
                    let gx = slot(grads, *x, y.len());
                    for (i, &s) in segment.iter().enumerate() {
                        gx[i] += y[i] * (g[i] - dot[s]);
                    }
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, wants(*x), g.iter().copied()),
            Op::RowDot(a, b) => {
                let (m, n) = val(*a).dims2();
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = slot(grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[r] * bv[r * n + c];
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            gb[r * n + c] += g[r] * av[r * n + c];
                        }
                    }
                }
            }
            Op::RowOuter(a, b) => {
                let (m, p) = val(*a).dims2();
                let q = val(*b).cols();
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = slot(grads, *a, m * p);
                    for r in 0..m {
                        for i in 0..p {
                            ga[r * p + i] += (0..q).map(|j| g[r * p * q + i * q + j] * bv[r * q + j]).sum::<f64>();
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, m * q);
                    for r in 0..m {
                        for j in 0..q {
                            gb[r * q + j] += (0..p).map(|i| g[r * p * q + i * q + j] * av[r * p + i]).sum::<f64>();
                        }
                    }
                }
            }
            Op::Mask(x, mask) => accumulate(grads, *x, wants(*x), g.iter().zip(mask.iter()).map(|(g, k)| g * k)),
            Op::Normalize(x, norm) => {
                if wants(*x) {
                    // d(x/|x|) = (g - y (y.g)) / |x|
                    let y = out.data();
                    let yg: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    let gx = slot(grads, *x, y.len());
                    for i in 0..y.len() {
                        gx[i] += (g[i] - y[i] * yg) / norm;
                    }
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                accumulate(grads, *x, wants(*x), std::iter::repeat_n(g[0], n));
            }
            Op::SumSquares(x) => {
                accumulate(grads, *x, wants(*x), val(*x).data().iter().map(|v| 2.0 * v * g[0]));
            }
            Op::BceLogits { logit, labels, weights } => {
                if wants(*logit) {
                    let z = val(*logit).data();
                    let gz = slot(grads, *logit, z.len());
                    for i in 0..z.len() {
                        gz[i] += g[0] * weights[i] * (super::sigmoid(z[i]) - labels[i]);
                    }
                }
            }
            Op::Bce { pred, labels, weights } => {
                if wants(*pred) {
                    let p = val(*pred).data();
                    let gp = slot(grads, *pred, p.len());
                    for i in 0..p.len() {
                        if p[i] <= PROB_EPS || p[i] >= 1.0 - PROB_EPS {
                            continue;
                        }
                        let y = labels[i];
                        gp[i] += g[0] * weights[i] * (-y / p[i] + (1.0 - y) / (1.0 - p[i]));
                    }
                }
            }
        }
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, wants: bool, g: impl ExactSizeIterator<Item = f64>) {
    if !wants {
        return;
    }
    let len = g.len();
    let dst = slot(grads, v, len);
    for (d, x) in dst.iter_mut().zip(g) {
        *d += x;
    }
}

/// `c[m, n] += a[m, k] * b[k, n]` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices fully contained in `a`, `b` and
    // `c`, whose lengths are checked by the callers' shape validation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            1.0,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Gradients from one backward pass.
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient w.r.t. a node, if any flowed into it.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.per_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_zero_propagation() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(Tensor::zeros(&[3, 1]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_mismatch_names_both_operands() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 1]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 1]"), "{msg}");
    }

    #[test]
    fn sigmoid_and_prelu_forward() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 3]));
        let s = g.sigmoid(z).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));

        let x = g.constant(t(&[1, 2], &[-2.0, 3.0]));
        let a = g.constant(t(&[1, 1], &[0.25]));
        let y = g.prelu(x, a).unwrap();
        assert_eq!(g.value(y).data(), &[-0.5, 3.0]);
    }

    #[test]
    fn simple_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let s = g.sigmoid(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!((grads.of(x).unwrap()[0] - 0.25).abs() < 1e-15);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.of(x).unwrap()[0], 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 1]), true);
        let y = g.sigmoid(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn verify_mode_catches_nan() {
        let mut g = Graph::new().with_verify(true);
        let x = g.constant(Tensor::scalar(f64::MAX));
        let r = g.scale(x, 10.0);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn segment_pools() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 3.0, 3.0, 1.0]));
        let seg: Rc<[usize]> = vec![0, 0].into();
        let mean = g.segment_mean(x, seg.clone(), 2).unwrap();
        let max = g.segment_max(x, seg, 2).unwrap();
        assert_eq!(g.value(mean).data(), &[2.0, 2.0, 0.0, 0.0]);
        assert_eq!(g.value(max).data(), &[3.0, 3.0, 0.0, 0.0]);
    }

    /// Builds a scalar from `inputs` through one op; used for finite differences.
    type Build = fn(&mut Graph, &[Var]) -> Var;

    fn check_op(build: Build, inputs: Vec<Tensor>) {
        let mut g = Graph::new().with_verify(false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.of(vars[k]).map(|v| v.to_vec()).unwrap_or(vec![0.0; input.len()]);
            for (i, &a) in analytic.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut g = Graph::new().with_verify(false);
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.data_mut()[i] += delta;
                            }
                            g.leaf(t, true)
                        })
                        .collect();
                    let o = build(&mut g, &vs);
                    g.value(o).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = a.abs().max(numeric.abs()).max(1e-7);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "input {k} coord {i}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    /// Weighted sum so that every output coordinate carries a distinct gradient.
    fn reduce(g: &mut Graph, v: Var) -> Var {
        let n = g.value(v).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 7 % 5) as f64) - 1.1).collect();
        let shape = g.value(v).shape().to_vec();
        let wv = g.constant(Tensor::new(shape, w).unwrap());
        let p = g.mul(v, wv).unwrap();
        g.sum(p).unwrap()
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
    }

    fn away_from_zero(t: Tensor) -> Tensor {
        let d = t
            .data()
            .iter()
            .map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        Tensor::new(t.shape().to_vec(), d).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn grad_matmul(a in mat(3, 4), b in mat(4, 2)) {
            check_op(|g, v| { let y = g.matmul(v[0], v[1]).unwrap(); reduce(g, y) }, vec![a, b]);
        }

        #[test]
        fn grad_elementwise(a in mat(2, 3), b in mat(2, 3)) {
            check_op(|g, v| { let y = g.add(v[0], v[1]).unwrap(); reduce(g, y) }, vec![a.clone(), b.clone()]);
            check_op(|g, v| { let y = g.sub(v[0], v[1]).unwrap(); reduce(g, y) }, vec![a.clone(), b.clone()]);
            check_op(|g, v| { let y = g.mul(v[0], v[1]).unwrap(); reduce(g, y) }, vec![a.clone(), b.clone()]);
            check_op(|g, v| { let y = g.row_dot(v[0], v[1]).unwrap(); reduce(g, y) }, vec![a.clone(), b]);
            check_op(|g, v| { let y = g.scale(v[0], -1.7).unwrap(); reduce(g, y) }, vec![a]);
        }

        #[test]
        fn grad_activations(a in mat(2, 3), s in mat(1, 3)) {
            check_op(|g, v| { let y = g.sigmoid(v[0]).unwrap(); reduce(g, y) }, vec![a.clone()]);
            check_op(|g, v| { let y = g.tanh(v[0]).unwrap(); reduce(g, y) }, vec![a.clone()]);
            check_op(|g, v| { let y = g.prelu(v[0], v[1]).unwrap(); reduce(g, y) }, vec![away_from_zero(a), s]);
        }

        #[test]
        fn grad_broadcasts(a in mat(3, 2), b in mat(1, 2), c in mat(3, 1)) {
            check_op(|g, v| { let y = g.add_row(v[0], v[1]).unwrap(); reduce(g, y) }, vec![a.clone(), b]);
            check_op(|g, v| { let y = g.mul_col(v[0], v[1]).unwrap(); reduce(g, y) }, vec![a, c]);
        }

        #[test]
        fn grad_structure(a in mat(3, 2), b in mat(3, 3), c in mat(2, 2)) {
            check_op(|g, v| { let y = g.concat_cols(&[v[0], v[1]]).unwrap(); reduce(g, y) }, vec![a.clone(), b.clone()]);
            check_op(|g, v| { let y = g.concat_rows(&[v[0], v[1]]).unwrap(); reduce(g, y) }, vec![a.clone(), c]);
            check_op(|g, v| { let y = g.gather_rows(v[0], vec![2, 0, 2].into()).unwrap(); reduce(g, y) }, vec![a.clone()]);
            check_op(|g, v| { let y = g.scatter_add_rows(v[0], vec![1, 0, 1].into(), 3).unwrap(); reduce(g, y) }, vec![a.clone()]);
            check_op(|g, v| { let y = g.reshape(v[0], &[2, 3]).unwrap(); reduce(g, y) }, vec![a.clone()]);
            check_op(|g, v| { let y = g.row_outer(v[0], v[1]).unwrap(); reduce(g, y) }, vec![a.clone(), b]);
            check_op(|g, v| { let y = g.sum_squares(v[0]).unwrap(); g.scale(y, 0.5).unwrap() }, vec![a.clone()]);
            check_op(|g, v| { let y = g.normalize(v[0]).unwrap(); reduce(g, y) }, vec![away_from_zero(a)]);
        }

        #[test]
        fn grad_segments(a in mat(4, 2), w in mat(4, 1)) {
            check_op(|g, v| { let y = g.segment_mean(v[0], vec![0, 2, 0, 2].into(), 3).unwrap(); reduce(g, y) }, vec![a.clone()]);
            check_op(|g, v| { let y = g.segment_max(v[0], vec![0, 1, 0, 1].into(), 2).unwrap(); reduce(g, y) }, vec![a]);
            check_op(|g, v| { let y = g.segment_softmax(v[0], vec![0, 0, 1, 0].into()).unwrap(); reduce(g, y) }, vec![w]);
        }

        #[test]
        fn grad_bce(logits in mat(5, 1)) {
            check_op(|g, v| {
                let p = g.sigmoid(v[0]).unwrap();
                g.bce(p, vec![1.0, 0.0, 1.0, 1.0, 0.0].into(), vec![0.2, 0.5, 1.0, 0.1, 0.3].into()).unwrap()
            }, vec![logits]);
        }

        #[test]
        fn grad_bce_logits(logits in mat(5, 1)) {
            check_op(|g, v| {
                g.bce_logits(v[0], vec![1.0, 0.0, 1.0, 1.0, 0.0].into(), vec![0.2, 0.5, 1.0, 0.1, 0.3].into()).unwrap()
            }, vec![logits]);
        }

        #[test]
        fn bce_logits_matches_bce(logits in mat(6, 1)) {
            let labels = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
            let mut g = Graph::new();
            let z = g.constant(logits);
            let p = g.sigmoid(z).unwrap();
            let a = g.bce_mean(p, &labels).unwrap();
            let b = g.bce_logits_mean(z, &labels).unwrap();
            prop_assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-9);
        }
    }

    #[test]
    fn bce_logits_stays_finite_when_saturated() {
        let mut g = Graph::new();
        let z = g.leaf(t(&[2, 1], &[800.0, -800.0]), true);
        let loss = g.bce_logits_mean(z, &[0.0, 1.0]).unwrap();
        assert!((g.value(loss).item() - 800.0).abs() < 1e-9);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(z).unwrap(), &[0.5, -0.5]);
    }
}
