//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] is an arena of nodes; every operation appends one node holding
//! its forward value, so insertion order is already a topological order and
//! the backward sweep is a single reverse walk. [`Tensor`] is a `Copy` handle
//! (id + shape) into the arena, which keeps user code free of borrow
//! gymnastics.
//!
//! The tape is rebuilt for every forward pass: graph structure is cheap to
//! re-record compared to the dense matrix products it schedules, and a fresh
//! tape per step sidesteps stale-gradient bugs entirely.

use crate::diffcore::matrix::{matmul_into, matmul_nt_into, matmul_tn_into, Matrix};
use crate::error::{CareError, Result};

/// Epsilon added to the norm product in cosine similarity, so zero vectors
/// yield similarity 0 instead of NaN.
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a tape node. Cheap to copy; only valid for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Element count.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

/// Reduction flavor for [`Tape::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Column-wise sum over rows: `r x c -> 1 x c`.
    SumRows,
    /// Column-wise mean over rows: `r x c -> 1 x c`.
    MeanRows,
    /// Sum of all elements: `r x c -> 1 x 1`.
    SumAll,
    /// Mean of all elements: `r x c -> 1 x 1`.
    MeanAll,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    AddRowBias(usize, usize),
    ScaleRows(usize, usize),
    MulScalar(usize, usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    ConcatCols(usize, usize),
    Reduce(usize, Reduce),
    GatherRows(usize, Vec<usize>),
    StackScalars(Vec<usize>),
    CosineSim(usize, usize),
    L2Distance(usize, usize),
    SoftmaxCrossEntropy(usize, usize),
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Arena of recorded operations with forward values and (after
/// [`Tape::backward`]) gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, needs_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(values.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node {
            rows,
            cols,
            values,
            grad: None,
            needs_grad,
            op,
        });
        Tensor { id, rows, cols }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn vals(&self, id: usize) -> &[f64] {
        &self.nodes[id].values
    }

    /// Record a constant leaf (no gradient will be tracked through it).
    pub fn constant(&mut self, m: &Matrix) -> Tensor {
        self.push(m.rows(), m.cols(), m.as_slice().to_vec(), false, Op::Leaf)
    }

    /// Record a 1x1 constant.
    pub fn constant_scalar(&mut self, v: f64) -> Tensor {
        self.push(1, 1, vec![v], false, Op::Leaf)
    }

    /// Record a parameter leaf; its gradient is accumulated by
    /// [`Tape::backward`].
    pub fn param(&mut self, m: &Matrix) -> Tensor {
        self.push(m.rows(), m.cols(), m.as_slice().to_vec(), true, Op::Leaf)
    }

    /// Borrow the forward value of `t`.
    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].values
    }

    /// Copy the forward value of `t` into an owned matrix.
    pub fn value_matrix(&self, t: Tensor) -> Matrix {
        Matrix::from_vec(t.rows, t.cols, self.nodes[t.id].values.clone())
            .expect("node buffer always matches its shape")
    }

    /// Forward value of a 1x1 tensor.
    pub fn scalar_value(&self, t: Tensor) -> Result<f64> {
        if !t.is_scalar() {
            return Err(CareError::contract(
                "Tape::scalar_value",
                format!("tensor is {}x{}, not 1x1", t.rows, t.cols),
            ));
        }
        Ok(self.nodes[t.id].values[0])
    }

    /// Gradient of the last backward target with respect to `t`, as a matrix
    /// of `t`'s shape. Zero if `t` does not influence the target (or is a
    /// constant).
    pub fn grad_matrix(&self, t: Tensor) -> Matrix {
        match &self.nodes[t.id].grad {
            Some(g) => Matrix::from_vec(t.rows, t.cols, g.clone())
                .expect("gradient buffer always matches node shape"),
            None => Matrix::zeros(t.rows, t.cols),
        }
    }

    fn shape_err(op: &'static str, a: Tensor, b: Tensor) -> CareError {
        CareError::Shape {
            op,
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        }
    }

    /// Matrix product `a * b`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.cols != b.rows {
            return Err(Self::shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; a.rows * b.cols];
        matmul_into(self.vals(a.id), self.vals(b.id), &mut out, a.rows, a.cols, b.cols);
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(a.rows, b.cols, out, ng, Op::MatMul(a.id, b.id)))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Self::shape_err(name, a, b));
        }
        let out: Vec<f64> = self
            .vals(a.id)
            .iter()
            .zip(self.vals(b.id))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(a.rows, a.cols, out, ng, op))
    }

    /// Elementwise sum.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_elementwise("hadamard", a, b, |x, y| x * y, Op::Hadamard(a.id, b.id))
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, a: Tensor, k: f64) -> Tensor {
        let out: Vec<f64> = self.vals(a.id).iter().map(|&x| x * k).collect();
        let ng = self.needs(a.id);
        self.push(a.rows, a.cols, out, ng, Op::Scale(a.id, k))
    }

    /// Add a `1 x c` bias row to every row of an `r x c` matrix.
    pub fn add_row_bias(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        if bias.rows != 1 || bias.cols != a.cols {
            return Err(Self::shape_err("add_row_bias", a, bias));
        }
        let b = self.vals(bias.id).to_vec();
        let mut out = self.vals(a.id).to_vec();
        for row in out.chunks_mut(a.cols) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.needs(a.id) || self.needs(bias.id);
        Ok(self.push(a.rows, a.cols, out, ng, Op::AddRowBias(a.id, bias.id)))
    }

    /// Scale row `i` of an `r x c` matrix by element `i` of an `r x 1`
    /// column vector (the gating step of score-based pooling).
    pub fn scale_rows(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        if s.cols != 1 || s.rows != a.rows {
            return Err(Self::shape_err("scale_rows", a, s));
        }
        let sv = self.vals(s.id).to_vec();
        let mut out = self.vals(a.id).to_vec();
        for (row, &f) in out.chunks_mut(a.cols).zip(&sv) {
            for o in row.iter_mut() {
                *o *= f;
            }
        }
        let ng = self.needs(a.id) || self.needs(s.id);
        Ok(self.push(a.rows, a.cols, out, ng, Op::ScaleRows(a.id, s.id)))
    }

    /// Multiply every element of `a` by a differentiable 1x1 scalar.
    pub fn mul_scalar(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        if !s.is_scalar() {
            return Err(Self::shape_err("mul_scalar", a, s));
        }
        let f = self.vals(s.id)[0];
        let out: Vec<f64> = self.vals(a.id).iter().map(|&x| x * f).collect();
        let ng = self.needs(a.id) || self.needs(s.id);
        Ok(self.push(a.rows, a.cols, out, ng, Op::MulScalar(a.id, s.id)))
    }

    /// Rectified linear unit. The derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let out: Vec<f64> = self.vals(a.id).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a.id);
        self.push(a.rows, a.cols, out, ng, Op::Relu(a.id))
    }

    /// Hyperbolic tangent.
    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let out: Vec<f64> = self.vals(a.id).iter().map(|&x| x.tanh()).collect();
        let ng = self.needs(a.id);
        self.push(a.rows, a.cols, out, ng, Op::Tanh(a.id))
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let out: Vec<f64> = self.vals(a.id).iter().map(|&x| x.exp()).collect();
        let ng = self.needs(a.id);
        self.push(a.rows, a.cols, out, ng, Op::Exp(a.id))
    }

    /// Horizontal concatenation `[a | b]` of two matrices with equal row
    /// counts.
    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.rows != b.rows {
            return Err(Self::shape_err("concat_cols", a, b));
        }
        let cols = a.cols + b.cols;
        let mut out = Vec::with_capacity(a.rows * cols);
        for r in 0..a.rows {
            out.extend_from_slice(&self.vals(a.id)[r * a.cols..(r + 1) * a.cols]);
            out.extend_from_slice(&self.vals(b.id)[r * b.cols..(r + 1) * b.cols]);
        }
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(a.rows, cols, out, ng, Op::ConcatCols(a.id, b.id)))
    }

    /// Row- or element-wise reduction (see [`Reduce`]).
    pub fn reduce(&mut self, a: Tensor, how: Reduce) -> Tensor {
        let (rows, cols, out) = match how {
            Reduce::SumRows | Reduce::MeanRows => {
                let mut acc = vec![0.0; a.cols];
                for row in self.vals(a.id).chunks(a.cols) {
                    for (s, &v) in acc.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                if how == Reduce::MeanRows {
                    let n = a.rows as f64;
                    for s in acc.iter_mut() {
                        *s /= n;
                    }
                }
                (1, a.cols, acc)
            }
            Reduce::SumAll | Reduce::MeanAll => {
                let mut s: f64 = self.vals(a.id).iter().sum();
                if how == Reduce::MeanAll {
                    s /= (a.rows * a.cols) as f64;
                }
                (1, 1, vec![s])
            }
        };
        let ng = self.needs(a.id);
        self.push(rows, cols, out, ng, Op::Reduce(a.id, how))
    }

    /// Column-wise mean over rows (readout over node embeddings).
    pub fn mean_rows(&mut self, a: Tensor) -> Tensor {
        self.reduce(a, Reduce::MeanRows)
    }

    /// Column-wise sum over rows.
    pub fn sum_rows(&mut self, a: Tensor) -> Tensor {
        self.reduce(a, Reduce::SumRows)
    }

    /// Select rows of `a` by index, in the given order. Repeated indices are
    /// allowed; their gradients accumulate.
    pub fn gather_rows(&mut self, a: Tensor, indices: &[usize]) -> Result<Tensor> {
        for &i in indices {
            if i >= a.rows {
                return Err(CareError::contract(
                    "gather_rows",
                    format!("row index {} out of range for {} rows", i, a.rows),
                ));
            }
        }
        let mut out = Vec::with_capacity(indices.len() * a.cols);
        for &i in indices {
            out.extend_from_slice(&self.vals(a.id)[i * a.cols..(i + 1) * a.cols]);
        }
        let ng = self.needs(a.id);
        Ok(self.push(indices.len(), a.cols, out, ng, Op::GatherRows(a.id, indices.to_vec())))
    }

    /// Pack a list of 1x1 tensors into a `1 x k` row (so e.g. their mean can
    /// be taken with one reduce).
    pub fn stack_scalars(&mut self, scalars: &[Tensor]) -> Result<Tensor> {
        if scalars.is_empty() {
            return Err(CareError::contract("stack_scalars", "empty input list"));
        }
        let mut out = Vec::with_capacity(scalars.len());
        let mut ng = false;
        let mut ids = Vec::with_capacity(scalars.len());
        for t in scalars {
            if !t.is_scalar() {
                return Err(CareError::contract(
                    "stack_scalars",
                    format!("input is {}x{}, not 1x1", t.rows, t.cols),
                ));
            }
            out.push(self.vals(t.id)[0]);
            ng |= self.needs(t.id);
            ids.push(t.id);
        }
        Ok(self.push(1, scalars.len(), out, ng, Op::StackScalars(ids)))
    }

    /// Cosine similarity of two row vectors, as a 1x1 tensor.
    ///
    /// `sim = (u . v) / (|u| |v| + eps)` with `eps = 1e-12`, so a zero vector
    /// on either side yields similarity 0; in that case no gradient flows
    /// into the zero-norm side.
    pub fn cosine_similarity(&mut self, u: Tensor, v: Tensor) -> Result<Tensor> {
        if u.rows != 1 || v.rows != 1 || u.cols != v.cols {
            return Err(Self::shape_err("cosine_similarity", u, v));
        }
        let (dot, nu, nv) = {
            let uv = self.vals(u.id);
            let vv = self.vals(v.id);
            let dot: f64 = uv.iter().zip(vv).map(|(&x, &y)| x * y).sum();
            let nu = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
            (dot, nu, nv)
        };
        let sim = dot / (nu * nv + COSINE_EPS);
        let ng = self.needs(u.id) || self.needs(v.id);
        Ok(self.push(1, 1, vec![sim], ng, Op::CosineSim(u.id, v.id)))
    }

    /// Euclidean distance of two row vectors, as a 1x1 tensor. The
    /// subgradient at distance 0 is taken as 0.
    pub fn l2_distance(&mut self, u: Tensor, v: Tensor) -> Result<Tensor> {
        if u.rows != 1 || v.rows != 1 || u.cols != v.cols {
            return Err(Self::shape_err("l2_distance", u, v));
        }
        let d2: f64 = self
            .vals(u.id)
            .iter()
            .zip(self.vals(v.id))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(u.id) || self.needs(v.id);
        Ok(self.push(1, 1, vec![d2.sqrt()], ng, Op::L2Distance(u.id, v.id)))
    }

    /// Numerically stable softmax cross-entropy of a `1 x k` logit row
    /// against an integer label, as a 1x1 tensor. The max logit is subtracted
    /// before exponentiation, so large logits cannot overflow.
    pub fn softmax_cross_entropy(&mut self, logits: Tensor, label: usize) -> Result<Tensor> {
        if logits.rows != 1 {
            return Err(CareError::contract(
                "softmax_cross_entropy",
                format!("logits must be a row vector, got {}x{}", logits.rows, logits.cols),
            ));
        }
        if label >= logits.cols {
            return Err(CareError::contract(
                "softmax_cross_entropy",
                format!("label {} out of range for {} classes", label, logits.cols),
            ));
        }
        let z = self.vals(logits.id);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let ng = self.needs(logits.id);
        Ok(self.push(1, 1, vec![loss], ng, Op::SoftmaxCrossEntropy(logits.id, label)))
    }

    /// Softmax probabilities of a `1 x k` logit row (forward-only helper for
    /// predictions; not differentiable).
    pub fn softmax_values(&self, logits: Tensor) -> Vec<f64> {
        let z = self.value(logits);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    fn add_grad(&mut self, id: usize, contrib: &[f64]) {
        let node = &mut self.nodes[id];
        if !node.needs_grad {
            return;
        }
        let g = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.rows * node.cols]);
        for (o, &c) in g.iter_mut().zip(contrib) {
            *o += c;
        }
    }

    /// Accumulate `d(target)/d(node)` into every node that influences
    /// `target`. `target` must be 1x1. Gradients from a previous backward on
    /// the same tape are cleared first.
    pub fn backward(&mut self, target: Tensor) -> Result<()> {
        if !target.is_scalar() {
            return Err(CareError::contract(
                "Tape::backward",
                format!("target must be 1x1, got {}x{}", target.rows, target.cols),
            ));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        if !self.nodes[target.id].needs_grad {
            // Target does not depend on any parameter; nothing to do.
            return Ok(());
        }
        self.nodes[target.id].grad = Some(vec![1.0]);

        for id in (0..=target.id).rev() {
            let upstream = match &self.nodes[id].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ar, ac) = (self.nodes[a].rows, self.nodes[a].cols);
                    let bc = self.nodes[b].cols;
                    if self.needs(a) {
                        let mut da = vec![0.0; ar * ac];
                        matmul_nt_into(&upstream, self.vals(b), &mut da, ar, bc, ac);
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; ac * bc];
                        matmul_tn_into(self.vals(a), &upstream, &mut db, ar, ac, bc);
                        self.add_grad(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    self.add_grad(a, &upstream);
                    self.add_grad(b, &upstream);
                }
                Op::Sub(a, b) => {
                    self.add_grad(a, &upstream);
                    let neg: Vec<f64> = upstream.iter().map(|&g| -g).collect();
                    self.add_grad(b, &neg);
                }
                Op::Hadamard(a, b) => {
                    if self.needs(a) {
                        let da: Vec<f64> = upstream
                            .iter()
                            .zip(self.vals(b))
                            .map(|(&g, &y)| g * y)
                            .collect();
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> = upstream
                            .iter()
                            .zip(self.vals(a))
                            .map(|(&g, &x)| g * x)
                            .collect();
                        self.add_grad(b, &db);
                    }
                }
                Op::Scale(a, k) => {
                    let da: Vec<f64> = upstream.iter().map(|&g| g * k).collect();
                    self.add_grad(a, &da);
                }
                Op::AddRowBias(a, bias) => {
                    self.add_grad(a, &upstream);
                    if self.needs(bias) {
                        let cols = self.nodes[bias].cols;
                        let mut db = vec![0.0; cols];
                        for row in upstream.chunks(cols) {
                            for (s, &g) in db.iter_mut().zip(row) {
                                *s += g;
                            }
                        }
                        self.add_grad(bias, &db);
                    }
                }
                Op::ScaleRows(a, s) => {
                    let cols = self.nodes[a].cols;
                    if self.needs(a) {
                        let sv = self.vals(s);
                        let mut da = Vec::with_capacity(upstream.len());
                        for (row, &f) in upstream.chunks(cols).zip(sv) {
                            da.extend(row.iter().map(|&g| g * f));
                        }
                        self.add_grad(a, &da);
                    }
                    if self.needs(s) {
                        let av = self.vals(a);
                        let ds: Vec<f64> = upstream
                            .chunks(cols)
                            .zip(av.chunks(cols))
                            .map(|(g_row, a_row)| {
                                g_row.iter().zip(a_row).map(|(&g, &x)| g * x).sum()
                            })
                            .collect();
                        self.add_grad(s, &ds);
                    }
                }
                Op::MulScalar(a, s) => {
                    if self.needs(a) {
                        let f = self.vals(s)[0];
                        let da: Vec<f64> = upstream.iter().map(|&g| g * f).collect();
                        self.add_grad(a, &da);
                    }
                    if self.needs(s) {
                        let ds: f64 = upstream
                            .iter()
                            .zip(self.vals(a))
                            .map(|(&g, &x)| g * x)
                            .sum();
                        self.add_grad(s, &[ds]);
                    }
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = upstream
                        .iter()
                        .zip(self.vals(a))
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Tanh(a) => {
                    let out = &self.nodes[id].values;
                    let da: Vec<f64> = upstream
                        .iter()
                        .zip(out)
                        .map(|(&g, &y)| g * (1.0 - y * y))
                        .collect();
                    self.add_grad(a, &da);
                }
                Op::Exp(a) => {
                    let out = &self.nodes[id].values;
                    let da: Vec<f64> = upstream.iter().zip(out).map(|(&g, &y)| g * y).collect();
                    self.add_grad(a, &da);
                }
                Op::ConcatCols(a, b) => {
                    let (ac, bc) = (self.nodes[a].cols, self.nodes[b].cols);
                    let rows = self.nodes[id].rows;
                    if self.needs(a) {
                        let mut da = Vec::with_capacity(rows * ac);
                        for r in 0..rows {
                            da.extend_from_slice(&upstream[r * (ac + bc)..r * (ac + bc) + ac]);
                        }
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = Vec::with_capacity(rows * bc);
                        for r in 0..rows {
                            db.extend_from_slice(
                                &upstream[r * (ac + bc) + ac..(r + 1) * (ac + bc)],
                            );
                        }
                        self.add_grad(b, &db);
                    }
                }
                Op::Reduce(a, how) => {
                    let (rows, cols) = (self.nodes[a].rows, self.nodes[a].cols);
                    let da: Vec<f64> = match how {
                        Reduce::SumRows => (0..rows * cols).map(|i| upstream[i % cols]).collect(),
                        Reduce::MeanRows => {
                            let n = rows as f64;
                            (0..rows * cols).map(|i| upstream[i % cols] / n).collect()
                        }
                        Reduce::SumAll => vec![upstream[0]; rows * cols],
                        Reduce::MeanAll => {
                            vec![upstream[0] / (rows * cols) as f64; rows * cols]
                        }
                    };
                    self.add_grad(a, &da);
                }
                Op::GatherRows(a, indices) => {
                    if self.needs(a) {
                        let cols = self.nodes[a].cols;
                        let mut da = vec![0.0; self.nodes[a].rows * cols];
                        for (t, &i) in indices.iter().enumerate() {
                            let src = &upstream[t * cols..(t + 1) * cols];
                            let dst = &mut da[i * cols..(i + 1) * cols];
                            for (o, &g) in dst.iter_mut().zip(src) {
                                *o += g;
                            }
                        }
                        self.add_grad(a, &da);
                    }
                }
                Op::StackScalars(ids) => {
                    for (t, &sid) in ids.iter().enumerate() {
                        self.add_grad(sid, &[upstream[t]]);
                    }
                }
                Op::CosineSim(u, v) => {
                    let g = upstream[0];
                    let (du, dv) = {
                        let uv = self.vals(u);
                        let vv = self.vals(v);
                        let nu = uv.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nv = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let denom = nu * nv + COSINE_EPS;
                        let sim = self.nodes[id].values[0];
                        let du: Vec<f64> = uv
                            .iter()
                            .zip(vv)
                            .map(|(&ui, &vi)| {
                                let radial = if nu > 0.0 { sim * nv * ui / (denom * nu) } else { 0.0 };
                                g * (vi / denom - radial)
                            })
                            .collect();
                        let dv: Vec<f64> = uv
                            .iter()
                            .zip(vv)
                            .map(|(&ui, &vi)| {
                                let radial = if nv > 0.0 { sim * nu * vi / (denom * nv) } else { 0.0 };
                                g * (ui / denom - radial)
                            })
                            .collect();
                        (du, dv)
                    };
                    self.add_grad(u, &du);
                    self.add_grad(v, &dv);
                }
                Op::L2Distance(u, v) => {
                    let g = upstream[0];
                    let dist = self.nodes[id].values[0];
                    if dist > 0.0 {
                        let du: Vec<f64> = self
                            .vals(u)
                            .iter()
                            .zip(self.vals(v))
                            .map(|(&x, &y)| g * (x - y) / dist)
                            .collect();
                        let dv: Vec<f64> = du.iter().map(|&d| -d).collect();
                        self.add_grad(u, &du);
                        self.add_grad(v, &dv);
                    }
                }
                Op::SoftmaxCrossEntropy(a, label) => {
                    if self.needs(a) {
                        let g = upstream[0];
                        let z = self.vals(a);
                        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        let da: Vec<f64> = exps
                            .iter()
                            .enumerate()
                            .map(|(j, &e)| {
                                let p = e / sum;
                                g * (p - if j == label { 1.0 } else { 0.0 })
                            })
                            .collect();
                        self.add_grad(a, &da);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_similarity_known_value() {
        let mut tape = Tape::new();
        let u = tape.constant(&mat(&[&[1.0, 1.0]]));
        let v = tape.constant(&mat(&[&[1.0, 0.0]]));
        let s = tape.cosine_similarity(u, v).unwrap();
        let got = tape.scalar_value(s).unwrap();
        assert!((got - 0.7071067811865475).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn cosine_similarity_zero_vector_is_zero() {
        let mut tape = Tape::new();
        let u = tape.param(&Matrix::zeros(1, 3));
        let v = tape.constant(&mat(&[&[1.0, 2.0, 3.0]]));
        let s = tape.cosine_similarity(u, v).unwrap();
        assert_eq!(tape.scalar_value(s).unwrap(), 0.0);
        // Backward must not produce NaN.
        tape.backward(s).unwrap();
        assert!(tape.grad_matrix(u).all_finite());
    }

    #[test]
    fn cross_entropy_known_values() {
        let mut tape = Tape::new();
        // Equal two-way logits: loss is ln 2.
        let l2 = tape.constant(&mat(&[&[0.0, 0.0]]));
        let a = tape.softmax_cross_entropy(l2, 0).unwrap();
        assert!((tape.scalar_value(a).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        // Equal six-way logits: loss is ln 6.
        let l6 = tape.constant(&Matrix::zeros(1, 6));
        let b = tape.softmax_cross_entropy(l6, 3).unwrap();
        assert!((tape.scalar_value(b).unwrap() - 6.0_f64.ln()).abs() < 1e-15);

        // Extreme logits stay finite thanks to max subtraction.
        let lx = tape.constant(&mat(&[&[1000.0, 0.0]]));
        let c = tape.softmax_cross_entropy(lx, 0).unwrap();
        let v = tape.scalar_value(c).unwrap();
        assert!(v.is_finite());
        assert!(v.abs() < 1e-12, "correct-class huge logit gives ~0 loss, got {v}");
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.param(&mat(&[&[1.0, 2.0, 0.5]]));
        let loss = tape.softmax_cross_entropy(logits, 1).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad_matrix(logits);
        let p = tape.softmax_values(logits);
        for j in 0..3 {
            let want = p[j] - if j == 1 { 1.0 } else { 0.0 };
            assert!((g.get(0, j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_through_matmul_chain() {
        // loss = sum(relu(x W)) with hand-checkable numbers.
        let mut tape = Tape::new();
        let x = tape.constant(&mat(&[&[1.0, -1.0]]));
        let w = tape.param(&mat(&[&[2.0, -3.0], &[1.0, 1.0]]));
        let h = tape.matmul(x, w).unwrap(); // [1, -4]
        let r = tape.relu(h); // [1, 0]
        let loss = tape.reduce(r, Reduce::SumAll);
        assert_eq!(tape.scalar_value(loss).unwrap(), 1.0);
        tape.backward(loss).unwrap();
        let g = tape.grad_matrix(w);
        // d loss / d w = x^T * [1, 0] (relu mask kills column 1)
        assert_eq!(g.row(0), &[1.0, 0.0]);
        assert_eq!(g.row(1), &[-1.0, 0.0]);
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let mut tape = Tape::new();
        let a = tape.param(&mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let g = tape.gather_rows(a, &[0, 0, 1]).unwrap();
        let loss = tape.reduce(g, Reduce::SumAll);
        tape.backward(loss).unwrap();
        let grad = tape.grad_matrix(a);
        assert_eq!(grad.row(0), &[2.0, 2.0]);
        assert_eq!(grad.row(1), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_target() {
        let mut tape = Tape::new();
        let a = tape.param(&Matrix::zeros(2, 2));
        let err = tape.backward(a).unwrap_err();
        assert!(matches!(err, CareError::Contract { .. }));
    }

    #[test]
    fn gradients_reset_between_backward_calls() {
        let mut tape = Tape::new();
        let a = tape.param(&mat(&[&[3.0]]));
        let b = tape.scale(a, 2.0);
        tape.backward(b).unwrap();
        tape.backward(b).unwrap();
        assert_eq!(tape.grad_matrix(a).get(0, 0), 2.0);
    }

    #[test]
    fn constants_collect_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(&mat(&[&[5.0]]));
        let p = tape.param(&mat(&[&[2.0]]));
        let prod = tape.hadamard(c, p).unwrap();
        tape.backward(prod).unwrap();
        assert_eq!(tape.grad_matrix(p).get(0, 0), 5.0);
        assert_eq!(tape.grad_matrix(c).get(0, 0), 0.0);
    }
}
