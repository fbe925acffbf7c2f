//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] is an append-only arena of tensors together with the primitive
//! operations that produced them. Building the forward pass records enough
//! structure to replay the chain rule in reverse. All arithmetic is 64-bit
//! with a fixed summation order (row-major, left to right), so repeated runs
//! on identical inputs are bitwise reproducible.

use std::collections::HashMap;
use std::fmt;

/// Floor applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Tolerance used to check that cross-entropy inputs are normalized.
pub const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum AutodiffError {
    /// Two operands have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has a shape the operation cannot accept.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
    },
    /// Raw buffer length does not match the product of the shape extents.
    LengthMismatch {
        expected: usize,
        got: usize,
    },
    /// An operation received or produced a NaN/Inf where it must not.
    NonFinite {
        op: &'static str,
    },
    IndexOutOfRange {
        index: usize,
        size: usize,
    },
    /// `backward` was called on a non-scalar tensor.
    NotScalar {
        shape: Vec<usize>,
    },
    /// A probability vector does not sum to 1 within [`PROB_SUM_TOL`].
    NotNormalized {
        sum: f64,
    },
    EmptyInput {
        op: &'static str,
    },
    DuplicateParam {
        name: String,
    },
    UnknownParam {
        name: String,
    },
}

impl fmt::Display for AutodiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AutodiffError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            AutodiffError::BadShape { op, shape } => {
                write!(f, "{op}: unsupported shape {shape:?}")
            }
            AutodiffError::LengthMismatch { expected, got } => {
                write!(
                    f,
                    "value buffer length {got} does not match shape product {expected}"
                )
            }
            AutodiffError::NonFinite { op } => write!(f, "{op}: non-finite value"),
            AutodiffError::IndexOutOfRange { index, size } => {
                write!(f, "index {index} out of range for size {size}")
            }
            AutodiffError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            AutodiffError::NotNormalized { sum } => {
                write!(f, "probability vector sums to {sum}, expected 1")
            }
            AutodiffError::EmptyInput { op } => write!(f, "{op}: empty input"),
            AutodiffError::DuplicateParam { name } => write!(f, "duplicate parameter {name:?}"),
            AutodiffError::UnknownParam { name } => write!(f, "unknown parameter {name:?}"),
        }
    }
}

impl std::error::Error for AutodiffError {}

pub type AdResult<T> = Result<T, AutodiffError>;

/// Index of the winning coordinate, ties broken toward the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Dense n-dimensional array participating in a differentiable computation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> AdResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutodiffError::LengthMismatch {
                expected,
                got: values.len(),
            });
        }
        let grad = vec![0.0; values.len()];
        Ok(Tensor {
            shape,
            values,
            grad,
            requires_grad,
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: vec![0.0; n],
            requires_grad,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }

    /// Handle for the tensor at a raw tape position.
    pub fn from_index(index: usize) -> Self {
        TensorId(index)
    }
}

/// Primitive operation record. Inputs are ids of earlier tape entries, so the
/// tape is topologically ordered by construction.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Tanh { x: TensorId },
    Sigmoid { x: TensorId },
    Softmax { x: TensorId },
    CrossEntropy { p: TensorId, target: usize },
    Concat { a: TensorId, b: TensorId },
    Row { m: TensorId, index: usize },
    AddRowBroadcast { m: TensorId, v: TensorId },
    Transpose { x: TensorId },
    Sum { x: TensorId },
}

/// Ordered record of tensors and the operations that produced them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

// Forward kernels. These are the single source of truth for both op
// construction and tape replay, and they fix the summation order.
mod kernels {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x * y).collect()
    }

    pub fn tanh(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v.tanh()).collect()
    }

    pub fn sigmoid(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
    }

    pub fn softmax(x: &[f64]) -> Vec<f64> {
        let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
        let mut sum = 0.0;
        for e in &exps {
            sum += e;
        }
        exps.iter().map(|e| e / sum).collect()
    }

    pub fn cross_entropy(p: &[f64], target: usize) -> f64 {
        -p[target].clamp(super::LOG_CLAMP, 1.0).ln()
    }

    pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(a.len() + b.len());
        out.extend_from_slice(a);
        out.extend_from_slice(b);
        out
    }

    pub fn row(m: &[f64], cols: usize, index: usize) -> Vec<f64> {
        m[index * cols..(index + 1) * cols].to_vec()
    }

    pub fn add_row_broadcast(m: &[f64], v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = m[r * cols + c] + v[c];
            }
        }
        out
    }

    pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        out
    }

    pub fn sum(x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for v in x {
            acc += v;
        }
        acc
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(tensor);
        self.ops.push(op);
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(
        &mut self,
        values: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> AdResult<TensorId> {
        let t = Tensor::new(values, shape, requires_grad)?;
        Ok(self.push(t, Op::Leaf))
    }

    pub fn leaf_scalar(&mut self, value: f64, requires_grad: bool) -> TensorId {
        self.push(
            Tensor::new(vec![value], vec![1], requires_grad).expect("scalar shape"),
            Op::Leaf,
        )
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> AdResult<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(AutodiffError::BadShape {
                op,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    /// Standard matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> AdResult<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = kernels::matmul(self.values(a), self.values(b), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let t = Tensor::new(values, vec![m, n], rg)?;
        Ok(self.push(t, Op::MatMul { a, b }))
    }

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
    ) -> AdResult<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Element-wise addition of two shape-congruent tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> AdResult<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let values = kernels::add(self.values(a), self.values(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let t = Tensor::new(values, self.shape(a).to_vec(), rg)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> AdResult<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let values = kernels::mul(self.values(a), self.values(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let t = Tensor::new(values, self.shape(a).to_vec(), rg)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let values = kernels::tanh(self.values(x));
        let rg = self.requires_grad(x);
        let t = Tensor::new(values, self.shape(x).to_vec(), rg).expect("shape preserved");
        self.push(t, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let values = kernels::sigmoid(self.values(x));
        let rg = self.requires_grad(x);
        let t = Tensor::new(values, self.shape(x).to_vec(), rg).expect("shape preserved");
        self.push(t, Op::Sigmoid { x })
    }

    /// Numerically stable softmax over all elements (max-shifted).
    pub fn softmax(&mut self, x: TensorId) -> AdResult<TensorId> {
        if self.values(x).is_empty() {
            return Err(AutodiffError::EmptyInput { op: "softmax" });
        }
        if self.values(x).iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "softmax" });
        }
        let values = kernels::softmax(self.values(x));
        let rg = self.requires_grad(x);
        let t = Tensor::new(values, self.shape(x).to_vec(), rg)?;
        Ok(self.push(t, Op::Softmax { x }))
    }

    /// `-log p[target]`, with `p[target]` clamped to `[1e-12, 1]` before the log.
    pub fn cross_entropy(&mut self, p: TensorId, target: usize) -> AdResult<TensorId> {
        let n = self.values(p).len();
        if target >= n {
            return Err(AutodiffError::IndexOutOfRange {
                index: target,
                size: n,
            });
        }
        let sum: f64 = kernels::sum(self.values(p));
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(AutodiffError::NotNormalized { sum });
        }
        let value = kernels::cross_entropy(self.values(p), target);
        let rg = self.requires_grad(p);
        let t = Tensor::new(vec![value], vec![1], rg)?;
        Ok(self.push(t, Op::CrossEntropy { p, target }))
    }

    /// Concatenation of two row vectors `[1, a]` and `[1, b]` into `[1, a+b]`.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> AdResult<TensorId> {
        let (ra, ca) = self.dims2(a, "concat")?;
        let (rb, cb) = self.dims2(b, "concat")?;
        if ra != 1 || rb != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let values = kernels::concat(self.values(a), self.values(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let t = Tensor::new(values, vec![1, ca + cb], rg)?;
        Ok(self.push(t, Op::Concat { a, b }))
    }

    /// Selects row `index` of a 2-D tensor as a `[1, cols]` tensor.
    pub fn row(&mut self, m: TensorId, index: usize) -> AdResult<TensorId> {
        let (rows, cols) = self.dims2(m, "row")?;
        if index >= rows {
            return Err(AutodiffError::IndexOutOfRange { index, size: rows });
        }
        let values = kernels::row(self.values(m), cols, index);
        let rg = self.requires_grad(m);
        let t = Tensor::new(values, vec![1, cols], rg)?;
        Ok(self.push(t, Op::Row { m, index }))
    }

    /// Adds a `[1, cols]` row vector to every row of a `[rows, cols]` tensor.
    pub fn add_row_broadcast(&mut self, m: TensorId, v: TensorId) -> AdResult<TensorId> {
        let (rows, cols) = self.dims2(m, "add_row_broadcast")?;
        let (rv, cv) = self.dims2(v, "add_row_broadcast")?;
        if rv != 1 || cv != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.shape(m).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let values = kernels::add_row_broadcast(self.values(m), self.values(v), rows, cols);
        let rg = self.requires_grad(m) || self.requires_grad(v);
        let t = Tensor::new(values, vec![rows, cols], rg)?;
        Ok(self.push(t, Op::AddRowBroadcast { m, v }))
    }

    pub fn transpose(&mut self, x: TensorId) -> AdResult<TensorId> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let values = kernels::transpose(self.values(x), rows, cols);
        let rg = self.requires_grad(x);
        let t = Tensor::new(values, vec![cols, rows], rg)?;
        Ok(self.push(t, Op::Transpose { x }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let value = kernels::sum(self.values(x));
        let rg = self.requires_grad(x);
        let t = Tensor::new(vec![value], vec![1], rg).expect("scalar shape");
        self.push(t, Op::Sum { x })
    }

    /// Accumulates `d loss / d tensor` into each requires-grad tensor's grad.
    ///
    /// Repeated calls without resetting grads accumulate, so multi-output
    /// losses can be backpropagated term by term.
    pub fn backward(&mut self, loss: TensorId) -> AdResult<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        adj[loss.0][0] = 1.0;

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            // Split off this node's adjoint so inputs can be written.
            let g = std::mem::take(&mut adj[id]);
            match self.ops[id].clone() {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.nodes[a.0].requires_grad {
                        // dA = G * B^T
                        let bv = &self.nodes[b.0].values;
                        let da = &mut adj[a.0];
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] += acc;
                            }
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T * G
                        let av = &self.nodes[a.0].values;
                        let db = &mut adj[b.0];
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += av[i * k + p] * g[i * n + j];
                                }
                                db[p * n + j] += acc;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        for (d, gi) in adj[a.0].iter_mut().zip(&g) {
                            *d += gi;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        for (d, gi) in adj[b.0].iter_mut().zip(&g) {
                            *d += gi;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        let bv = self.nodes[b.0].values.clone();
                        for ((d, gi), bi) in adj[a.0].iter_mut().zip(&g).zip(&bv) {
                            *d += gi * bi;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let av = self.nodes[a.0].values.clone();
                        for ((d, gi), ai) in adj[b.0].iter_mut().zip(&g).zip(&av) {
                            *d += gi * ai;
                        }
                    }
                }
                Op::Tanh { x } => {
                    if self.nodes[x.0].requires_grad {
                        let y = self.nodes[id].values.clone();
                        for ((d, gi), yi) in adj[x.0].iter_mut().zip(&g).zip(&y) {
                            *d += gi * (1.0 - yi * yi);
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if self.nodes[x.0].requires_grad {
                        let y = self.nodes[id].values.clone();
                        for ((d, gi), yi) in adj[x.0].iter_mut().zip(&g).zip(&y) {
                            *d += gi * yi * (1.0 - yi);
                        }
                    }
                }
                Op::Softmax { x } => {
                    if self.nodes[x.0].requires_grad {
                        let y = self.nodes[id].values.clone();
                        let mut dot = 0.0;
                        for (gi, yi) in g.iter().zip(&y) {
                            dot += gi * yi;
                        }
                        for ((d, gi), yi) in adj[x.0].iter_mut().zip(&g).zip(&y) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
                Op::CrossEntropy { p, target } => {
                    if self.nodes[p.0].requires_grad {
                        let pt = self.nodes[p.0].values[target];
                        // Inside the clamp window the log is constant.
                        if pt > LOG_CLAMP && pt <= 1.0 {
                            adj[p.0][target] += -g[0] / pt;
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let la = self.nodes[a.0].values.len();
                    if self.nodes[a.0].requires_grad {
                        for (d, gi) in adj[a.0].iter_mut().zip(&g[..la]) {
                            *d += gi;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        for (d, gi) in adj[b.0].iter_mut().zip(&g[la..]) {
                            *d += gi;
                        }
                    }
                }
                Op::Row { m, index } => {
                    if self.nodes[m.0].requires_grad {
                        let cols = self.nodes[m.0].shape[1];
                        for (c, gi) in g.iter().enumerate() {
                            adj[m.0][index * cols + c] += gi;
                        }
                    }
                }
                Op::AddRowBroadcast { m, v } => {
                    let (rows, cols) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                    if self.nodes[m.0].requires_grad {
                        for (d, gi) in adj[m.0].iter_mut().zip(&g) {
                            *d += gi;
                        }
                    }
                    if self.nodes[v.0].requires_grad {
                        for r in 0..rows {
                            for c in 0..cols {
                                adj[v.0][c] += g[r * cols + c];
                            }
                        }
                    }
                }
                Op::Transpose { x } => {
                    if self.nodes[x.0].requires_grad {
                        let (rows, cols) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                        for r in 0..rows {
                            for c in 0..cols {
                                adj[x.0][r * cols + c] += g[c * rows + r];
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    if self.nodes[x.0].requires_grad {
                        for d in adj[x.0].iter_mut() {
                            *d += g[0];
                        }
                    }
                }
            }
            adj[id] = g;
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if node.requires_grad {
                for (gd, ai) in node.grad.iter_mut().zip(a) {
                    *gd += ai;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.zero_grad();
        }
    }

    /// Recomputes every node's values from the recorded operations and leaf
    /// values. Returns the recomputed buffers in tape order; determinism means
    /// these are bitwise equal to the stored values.
    pub fn replay_forward(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (node, op) in self.nodes.iter().zip(&self.ops) {
            let v = match op {
                Op::Leaf => node.values.clone(),
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    kernels::matmul(&out[a.0], &out[b.0], m, k, n)
                }
                Op::Add { a, b } => kernels::add(&out[a.0], &out[b.0]),
                Op::Mul { a, b } => kernels::mul(&out[a.0], &out[b.0]),
                Op::Tanh { x } => kernels::tanh(&out[x.0]),
                Op::Sigmoid { x } => kernels::sigmoid(&out[x.0]),
                Op::Softmax { x } => kernels::softmax(&out[x.0]),
                Op::CrossEntropy { p, target } => {
                    vec![kernels::cross_entropy(&out[p.0], *target)]
                }
                Op::Concat { a, b } => kernels::concat(&out[a.0], &out[b.0]),
                Op::Row { m, index } => kernels::row(&out[m.0], self.nodes[m.0].shape[1], *index),
                Op::AddRowBroadcast { m, v } => {
                    let (rows, cols) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                    kernels::add_row_broadcast(&out[m.0], &out[v.0], rows, cols)
                }
                Op::Transpose { x } => {
                    let (rows, cols) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    kernels::transpose(&out[x.0], rows, cols)
                }
                Op::Sum { x } => vec![kernels::sum(&out[x.0])],
            };
            out.push(v);
        }
        out
    }
}

/// A named persistent parameter. Gradients accumulate here across tapes until
/// the caller (usually the optimizer) resets them.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of named parameters. Order is the canonical
/// serialization and flattening order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    items: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, values: Vec<f64>, shape: Vec<usize>) -> AdResult<usize> {
        if self.index.contains_key(name) {
            return Err(AutodiffError::DuplicateParam {
                name: name.to_string(),
            });
        }
        let tensor = Tensor::new(values, shape, true)?;
        self.items.push(Param {
            name: name.to_string(),
            tensor,
        });
        let idx = self.items.len() - 1;
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.items.iter()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.items[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.items[idx]
    }

    pub fn index_of(&self, name: &str) -> AdResult<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn by_name(&self, name: &str) -> AdResult<&Param> {
        Ok(&self.items[self.index_of(name)?])
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.tensor.zero_grad();
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.items {
            for g in p.tensor.grad_mut() {
                *g *= factor;
            }
        }
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_coords(&self) -> usize {
        self.items.iter().map(|p| p.tensor.len()).sum()
    }

    /// Concatenates all parameter values in set order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_coords());
        for p in &self.items {
            out.extend_from_slice(p.tensor.values());
        }
        out
    }

    /// Concatenates all gradients in set order.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_coords());
        for p in &self.items {
            out.extend_from_slice(p.tensor.grad());
        }
        out
    }

    /// Writes a flat coordinate vector back into the parameters.
    pub fn load_flat(&mut self, theta: &[f64]) -> AdResult<()> {
        if theta.len() != self.num_coords() {
            return Err(AutodiffError::LengthMismatch {
                expected: self.num_coords(),
                got: theta.len(),
            });
        }
        let mut off = 0;
        for p in &mut self.items {
            let n = p.tensor.len();
            p.tensor.values_mut().copy_from_slice(&theta[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Registers every parameter as a requires-grad leaf on a tape, in set
    /// order, and returns the binding used to harvest gradients afterwards.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let ids = self
            .items
            .iter()
            .map(|p| {
                tape.leaf(p.tensor.values().to_vec(), p.tensor.shape().to_vec(), true)
                    .expect("parameter shapes are validated at construction")
            })
            .collect();
        ParamBinding { ids }
    }
}

/// Maps parameters to their leaf ids on a particular tape.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    ids: Vec<TensorId>,
}

impl ParamBinding {
    pub fn id(&self, param_index: usize) -> TensorId {
        self.ids[param_index]
    }

    /// Adds the tape gradients of every bound leaf into the parameter grads.
    pub fn harvest(&self, tape: &Tape, params: &mut ParamSet) {
        for (idx, id) in self.ids.iter().enumerate() {
            let src = tape.grad(*id);
            let dst = params.get_mut(idx).tensor.grad_mut();
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}
