//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every differentiable operation as one node holding its
//! forward value plus whatever the backward rule needs. Nodes only reference
//! earlier nodes, so the reverse sweep is a single pass over the node list.
//! A tape has exactly one owner; build a fresh tape per forward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use super::Matrix;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Param,
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    ScaleBy,
    AddRow,
    AddCol,
    Gelu,
    Relu,
    Sign,
    Abs,
    LayerNorm,
    SoftmaxRows,
    FrobeniusNorm,
    Sum,
    SliceCols,
    SliceRows,
    ConcatCols,
    ConcatRows,
    ShrinkRelu,
    ZeroDiagonal,
    ResizeSquare,
    CrossEntropy,
    InvSpectralSq,
}

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    Gelu(usize),
    Relu(usize),
    Sign(usize),
    Abs(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    FrobeniusNorm(usize),
    Sum(usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    ShrinkRelu(usize, usize),
    ZeroDiagonal(usize),
    ResizeSquare(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
    /// `1/σ_max(a)²` with the top right singular vector `v` saved.
    InvSpectralSq {
        a: usize,
        v: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Param => OpKind::Param,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::AddRow(..) => OpKind::AddRow,
            Op::AddCol(..) => OpKind::AddCol,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Relu(_) => OpKind::Relu,
            Op::Sign(_) => OpKind::Sign,
            Op::Abs(_) => OpKind::Abs,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::FrobeniusNorm(_) => OpKind::FrobeniusNorm,
            Op::Sum(_) => OpKind::Sum,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ShrinkRelu(..) => OpKind::ShrinkRelu,
            Op::ZeroDiagonal(_) => OpKind::ZeroDiagonal,
            Op::ResizeSquare(_) => OpKind::ResizeSquare,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::InvSpectralSq { .. } => OpKind::InvSpectralSq,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::ShrinkRelu(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Sign(a)
            | Op::Abs(a)
            | Op::SoftmaxRows(a)
            | Op::FrobeniusNorm(a)
            | Op::Sum(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::ZeroDiagonal(a)
            | Op::ResizeSquare(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::InvSpectralSq { a, .. } => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Adjoints of every parameter leaf reachable from one backward sweep.
#[derive(Debug, Clone)]
pub struct GradientMap {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl GradientMap {
    /// Adjoint of a parameter leaf. Unreached parameters have zero adjoints.
    pub fn get(&self, v: Var) -> &Matrix {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.grads[v.index]
            .as_ref()
            .expect("gradient requested for a non-parameter node")
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `max(0, sgn(u)·max(|u| − t, 0))`, written out literally.
#[inline]
pub fn shrink_relu_scalar(u: f64, t: f64) -> f64 {
    let sgn = if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    };
    let v = sgn * (u.abs() - t).max(0.0);
    // `+ 0.0` normalizes a negative zero.
    v.max(0.0) + 0.0
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Row-wise layer normalization; returns (output, normalized input, per-row 1/std).
pub fn layer_norm_forward(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut normalized = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for c in 0..cols {
            let n = (row[c] - mean) * is;
            normalized[(r, c)] = n;
            out[(r, c)] = gamma.as_slice()[c] * n + beta.as_slice()[c];
        }
    }
    (out, normalized, inv_std)
}

/// Mean cross-entropy of row-wise softmax(logits) against integer labels; returns (loss, probabilities).
pub fn cross_entropy_forward(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let probs = logits.softmax_rows();
    let m = logits.rows();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        // log-sum-exp form keeps this finite for very confident wrong rows.
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    (loss / m as f64, probs)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[self.idx(v)].op.kind()
    }

    /// Input node indices of `v`; always smaller than `v.index()`.
    pub fn inputs(&self, v: Var) -> Vec<usize> {
        self.nodes[self.idx(v)].op.inputs()
    }

    #[inline]
    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        v.index
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        let requires_grad = match &op {
            Op::Param => true,
            Op::Constant => false,
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(Op::Param, m)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Constant, m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a.index, b.index), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(self.idx(a)), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a.index, b.index), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a.index, b.index), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Mul(a.index, b.index), v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(self.idx(a), s), v)
    }

    /// `s · a` where `s` is a 1x1 node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "scale_by",
                lhs: self.shape(a),
                rhs: sv.shape(),
            });
        }
        let v = self.value(a).scale(sv[(0, 0)]);
        Ok(self.push(Op::ScaleBy(a.index, s.index), v))
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row_broadcast(self.value(row))?;
        Ok(self.push(Op::AddRow(a.index, row.index), v))
    }

    pub fn add_col_broadcast(&mut self, a: Var, col: Var) -> Result<Var> {
        let v = self.value(a).add_col_broadcast(self.value(col))?;
        Ok(self.push(Op::AddCol(a.index, col.index), v))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(self.idx(a)), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0) + 0.0);
        self.push(Op::Relu(self.idx(a)), v)
    }

    pub fn sign(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sign);
        self.push(Op::Sign(self.idx(a)), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(Op::Abs(self.idx(a)), v)
    }

    /// Normalizes each row over the feature axis, then applies per-feature `gamma` and `beta` (both `1 x d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.shape(x).1;
        for p in [gamma, beta] {
            if self.shape(p) != (1, d) {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x),
                    rhs: self.shape(p),
                });
            }
        }
        let (out, normalized, inv_std) =
            layer_norm_forward(self.value(x), self.value(gamma), self.value(beta));
        Ok(self.push(
            Op::LayerNorm {
                x: x.index,
                gamma: gamma.index,
                beta: beta.index,
                normalized,
                inv_std,
            },
            out,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.push(Op::SoftmaxRows(self.idx(a)), v)
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).frobenius_norm());
        self.push(Op::FrobeniusNorm(self.idx(a)), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(self.idx(a)), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        self.push(Op::SliceCols(self.idx(a), start), v)
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        self.slice_cols(a, j, 1)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        self.push(Op::SliceRows(self.idx(a), start), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(Op::ConcatCols(parts.iter().map(|p| p.index).collect()), v))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats)?;
        Ok(self.push(Op::ConcatRows(parts.iter().map(|p| p.index).collect()), v))
    }

    /// Elementwise `max(0, sgn(u)·max(|u| − t, 0))` with `t` a 1x1 node.
    pub fn shrink_relu(&mut self, u: Var, threshold: Var) -> Result<Var> {
        let t = self.value(threshold);
        if t.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "shrink_relu",
                lhs: self.shape(u),
                rhs: t.shape(),
            });
        }
        let t = t[(0, 0)];
        if t < 0.0 {
            return Err(Error::usage(format!("negative shrinkage threshold {t}")));
        }
        let v = self.value(u).map(|x| shrink_relu_scalar(x, t));
        Ok(self.push(Op::ShrinkRelu(u.index, threshold.index), v))
    }

    pub fn zero_diagonal(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows().min(v.cols()) {
            v[(i, i)] = 0.0;
        }
        self.push(Op::ZeroDiagonal(self.idx(a)), v)
    }

    /// See [`Matrix::resize_square`].
    pub fn resize_square(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a).resize_square(n);
        self.push(Op::ResizeSquare(self.idx(a)), v)
    }

    /// Mean cross-entropy of `softmax(logits)` rows against `labels`; 1x1 result.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if labels.len() != l.rows() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: l.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= l.cols()) {
            return Err(Error::usage(format!("label {bad} out of range for {} classes", l.cols())));
        }
        let (loss, probs) = cross_entropy_forward(l, labels);
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.index,
                labels: labels.to_vec(),
                probs,
            },
            Matrix::scalar(loss),
        ))
    }

    /// `1/σ_max(a)²` by power iteration (see [`super::spectral_norm_sq`]); 1x1 result.
    /// The derivative `−2γ² (a v) vᵀ` assumes a simple top singular value.
    pub fn inv_spectral_sq(&mut self, a: Var, iters: usize, tol: f64) -> Result<Var> {
        let (s, v) = super::spectral::spectral_norm_sq_with_vector(self.value(a), iters, tol);
        if s == 0.0 {
            return Err(Error::usage("inverse spectral norm of a zero matrix"));
        }
        Ok(self.push(Op::InvSpectralSq { a: self.idx(a), v }, Matrix::scalar(1.0 / s)))
    }

    /// Reverse sweep from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &Matrix) -> Result<GradientMap> {
        if output.tape != self.id || output.index >= self.nodes.len() {
            return Err(Error::usage("backward seed is not a node of this tape"));
        }
        let out_shape = self.nodes[output.index].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::Dimension {
                op: "backward",
                lhs: out_shape,
                rhs: seed.shape(),
            });
        }
        let n = output.index + 1;
        let mut adj: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        adj[output.index] = Some(seed.clone());

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Param) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
        }

        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            grads.push(match node.op {
                Op::Param => Some(
                    adj.get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols())),
                ),
                _ => None,
            });
        }
        Ok(GradientMap {
            tape: self.id,
            grads,
        })
    }

    /// Backward from a 1x1 output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<GradientMap> {
        self.backward(output, &Matrix::scalar(1.0))
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], target: usize, g: Matrix) {
        if !self.nodes[target].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[target].value.shape());
        match &mut adj[target] {
            Some(existing) => existing.add_assign(&g).expect("adjoint shape"),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, g.matmul_t(val(*b)).unwrap());
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, val(*a).t_matmul(g).unwrap());
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, g.hadamard(val(*b)).unwrap());
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, g.hadamard(val(*a)).unwrap());
                }
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, g.scale(*s)),
            Op::ScaleBy(a, s) => {
                let sv = val(*s)[(0, 0)];
                if self.wants(*a) {
                    self.accumulate(adj, *a, g.scale(sv));
                }
                if self.wants(*s) {
                    let d = g.hadamard(val(*a)).unwrap().sum();
                    self.accumulate(adj, *s, Matrix::scalar(d));
                }
            }
            Op::AddRow(a, r) => {
                self.accumulate(adj, *a, g.clone());
                if self.wants(*r) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for row in 0..g.rows() {
                        for (o, v) in s.as_mut_slice().iter_mut().zip(g.row(row)) {
                            *o += v;
                        }
                    }
                    self.accumulate(adj, *r, s);
                }
            }
            Op::AddCol(a, c) => {
                self.accumulate(adj, *a, g.clone());
                if self.wants(*c) {
                    let s = Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                    self.accumulate(adj, *c, s);
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                self.accumulate(adj, *a, g.zip_with(x, "gelu'", |g, x| g * gelu_grad(x)).unwrap());
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = g
                    .zip_with(x, "relu'", |g, x| if x > 0.0 { g } else { 0.0 })
                    .unwrap();
                self.accumulate(adj, *a, d);
            }
            Op::Sign(a) => {
                let x = val(*a);
                self.accumulate(adj, *a, Matrix::zeros(x.rows(), x.cols()));
            }
            Op::Abs(a) => {
                let x = val(*a);
                self.accumulate(adj, *a, g.zip_with(x, "abs'", |g, x| g * sign(x)).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let gm = val(*gamma).as_slice();
                let (rows, cols) = g.shape();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.as_mut_slice()[c] += g[(r, c)] * normalized[(r, c)];
                            db.as_mut_slice()[c] += g[(r, c)];
                        }
                    }
                    self.accumulate(adj, *gamma, dg);
                    self.accumulate(adj, *beta, db);
                }
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dn: Vec<f64> = (0..cols).map(|c| g[(r, c)] * gm[c]).collect();
                        let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                        let mean_dn_n = dn
                            .iter()
                            .zip(normalized.row(r))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / cols as f64;
                        for c in 0..cols {
                            dx[(r, c)] =
                                inv_std[r] * (dn[c] - mean_dn - normalized[(r, c)] * mean_dn_n);
                        }
                    }
                    self.accumulate(adj, *x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        dx[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                self.accumulate(adj, *a, dx);
            }
            Op::FrobeniusNorm(a) => {
                let norm = node.value[(0, 0)];
                let x = val(*a);
                let d = if norm > 0.0 {
                    x.scale(g[(0, 0)] / norm)
                } else {
                    Matrix::zeros(x.rows(), x.cols())
                };
                self.accumulate(adj, *a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(adj, *a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(adj, *a, d);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    d.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(adj, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.wants(p) {
                        self.accumulate(adj, p, g.slice_cols(offset, w));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if self.wants(p) {
                        self.accumulate(adj, p, g.slice_rows(offset, h));
                    }
                    offset += h;
                }
            }
            Op::ShrinkRelu(u, t) => {
                let tv = val(*t)[(0, 0)];
                let uv = val(*u);
                // Active where u > t; the kink itself takes subgradient 0.
                let d = g
                    .zip_with(uv, "shrink'", |g, u| if u > tv { g } else { 0.0 })
                    .unwrap();
                if self.wants(*t) {
                    self.accumulate(adj, *t, Matrix::scalar(-d.sum()));
                }
                self.accumulate(adj, *u, d);
            }
            Op::ZeroDiagonal(a) => {
                let mut d = g.clone();
                for k in 0..d.rows().min(d.cols()) {
                    d[(k, k)] = 0.0;
                }
                self.accumulate(adj, *a, d);
            }
            Op::ResizeSquare(a) => {
                let (r, c) = val(*a).shape();
                let n = g.rows();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r.min(n) {
                    for j in 0..c.min(n) {
                        d[(i, j)] = g[(i, j)];
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len() as f64;
                let s = g[(0, 0)] / m;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[(r, y)] -= 1.0;
                }
                self.accumulate(adj, *logits, d.scale(s));
            }
            Op::InvSpectralSq { a, v } => {
                let x = val(*a);
                let gamma = node.value[(0, 0)];
                let xv = x.matmul(&Matrix::column_vector(v)).expect("saved vector length");
                let outer = xv.matmul(&Matrix::row_vector(v)).expect("outer product");
                self.accumulate(adj, *a, outer.scale(-2.0 * gamma * gamma * g[(0, 0)]));
            }
        }
    }
}
