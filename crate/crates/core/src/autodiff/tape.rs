//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation executed during one forward pass. Values
//! live on the tape as immutable nodes; [`Var`] is a cheap handle to one of
//! them. Nodes are appended in execution order, so the node list is already a
//! topological order and [`Tape::backward`] simply walks it in reverse.
//!
//! Stored [`Tensor`]s enter the tape through [`Tape::param`]. After the
//! backward pass the returned [`Gradients`] are keyed by [`TensorId`], and
//! [`Gradients::accumulate_into`] adds them to the owning tensors. A tape is
//! meant for a single forward/backward pass and then dropped.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, sigmoid};
use super::tensor::{checked_len, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Abs,
}

/// Operation implemented outside the tape core. The caller computes the
/// forward value; the op only supplies the vector-Jacobian products.
pub trait CustomOp<S: Scalar> {
    fn name(&self) -> &'static str;

    /// One gradient per input, each the length of that input.
    fn backward(&self, inputs: &[&[S]], output: &[S], grad_out: &[S]) -> Vec<Vec<S>>;
}

enum Op<S: Scalar> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Binary(BinaryOp, usize, usize, bool),
    Unary(UnaryOp, usize),
    Scale(usize, S),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    RowScale(usize, Rc<[S]>),
    SoftmaxRows(usize),
    LayerNorm { input: usize, inv_std: Vec<S> },
    Reshape(usize),
    Custom(Vec<usize>, Box<dyn CustomOp<S>>),
}

struct Node<S: Scalar> {
    dims: Vec<usize>,
    value: Rc<[S]>,
    op: Op<S>,
    needs_grad: bool,
    source: Option<TensorId>,
}

/// Record of one forward pass.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    idx: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.dims())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(
        &self,
        dims: Vec<usize>,
        value: Vec<S>,
        op: Op<S>,
        needs_grad: bool,
        source: Option<TensorId>,
    ) -> Var<'_, S> {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            dims,
            value: value.into(),
            op,
            needs_grad,
            source,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Records a stored tensor. It receives a gradient iff `requires_grad`.
    pub fn param(&self, t: &Tensor<S>) -> Var<'_, S> {
        let ng = t.requires_grad();
        self.push(
            t.dims().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            ng,
            ng.then(|| t.id()),
        )
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&self, t: &Tensor<S>) -> Var<'_, S> {
        self.push(t.dims().to_vec(), t.data().to_vec(), Op::Leaf, false, None)
    }

    pub fn constant_from(&self, dims: &[usize], values: Vec<S>) -> Result<Var<'_, S>> {
        let len = checked_len(dims)?;
        if len != values.len() {
            return Err(Error::Size(format!(
                "dims {dims:?} hold {len} values, got {}",
                values.len()
            )));
        }
        Ok(self.push(dims.to_vec(), values, Op::Leaf, false, None))
    }

    pub fn zeros(&self, dims: &[usize]) -> Var<'_, S> {
        let len = dims.iter().product();
        self.push(dims.to_vec(), vec![S::zero(); len], Op::Leaf, false, None)
    }

    /// Records an externally computed value produced by `op`.
    pub fn custom(
        &self,
        inputs: &[Var<'_, S>],
        dims: &[usize],
        value: Vec<S>,
        op: Box<dyn CustomOp<S>>,
    ) -> Result<Var<'_, S>> {
        let len = checked_len(dims)?;
        if len != value.len() {
            return Err(Error::shape(format!(
                "{} produced a wrong-sized value",
                op.name()
            )));
        }
        let ng = inputs.iter().any(|v| v.needs_grad());
        let ids = inputs.iter().map(|v| v.idx).collect();
        Ok(self.push(dims.to_vec(), value, Op::Custom(ids, op), ng, None))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    ///
    /// Nodes are visited once each, from `loss` down to the first node.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::shape("backward on an empty tape"));
        }
        let root = &nodes[loss.idx];
        if root.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got dims {:?}",
                root.dims
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(vec![S::one()]);

        for i in (0..=loss.idx).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut by_tensor: HashMap<TensorId, Vec<S>> = HashMap::new();
        for (node, g) in nodes.iter().zip(&grads) {
            if let (Some(id), Some(g)) = (node.source, g) {
                by_tensor
                    .entry(id)
                    .and_modify(|acc| acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b))
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Gradients {
            by_tensor,
            by_node: grads,
        })
    }
}

fn add_into<S: Scalar>(grads: &mut [Option<Vec<S>>], nodes: &[Node<S>], idx: usize, g: Vec<S>) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<S: Scalar>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].dims[0], nodes[*a].dims[1]);
            let n = nodes[*b].dims[1];
            if nodes[*a].needs_grad {
                // dA = dC · Bᵀ
                let mut da = vec![S::zero(); m * k];
                kernels::matmul_nt_acc(g, &nodes[*b].value, &mut da, m, n, k);
                add_into(grads, nodes, *a, da);
            }
            if nodes[*b].needs_grad {
                // dB = Aᵀ · dC
                let mut db = vec![S::zero(); k * n];
                kernels::matmul_tn_acc(&nodes[*a].value, g, &mut db, m, k, n);
                add_into(grads, nodes, *b, db);
            }
        }
        Op::MatMulNt(a, b) => {
            // C = A·Bᵀ with A [m,k], B [n,k]
            let (m, k) = (nodes[*a].dims[0], nodes[*a].dims[1]);
            let n = nodes[*b].dims[0];
            if nodes[*a].needs_grad {
                let mut da = vec![S::zero(); m * k];
                kernels::matmul_acc(g, &nodes[*b].value, &mut da, m, n, k);
                add_into(grads, nodes, *a, da);
            }
            if nodes[*b].needs_grad {
                let mut db = vec![S::zero(); n * k];
                kernels::matmul_tn_acc(g, &nodes[*a].value, &mut db, m, n, k);
                add_into(grads, nodes, *b, db);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (nodes[*a].dims[0], nodes[*a].dims[1]);
            add_into(grads, nodes, *a, kernels::transpose(g, n, m));
        }
        Op::Binary(op, a, b, bcast) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let cols = bv.len();
            let bi = |i: usize| if *bcast { i % cols } else { i };
            let ga: Vec<S> = match op {
                BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                BinaryOp::Mul => g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * bv[bi(i)])
                    .collect(),
                BinaryOp::Div => g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi / bv[bi(i)])
                    .collect(),
            };
            add_into(grads, nodes, *a, ga);
            if nodes[*b].needs_grad {
                let mut gb = vec![S::zero(); cols];
                for (i, &gi) in g.iter().enumerate() {
                    let j = bi(i);
                    let contrib = match op {
                        BinaryOp::Add => gi,
                        BinaryOp::Sub => -gi,
                        BinaryOp::Mul => gi * av[i],
                        BinaryOp::Div => -gi * av[i] / (bv[j] * bv[j]),
                    };
                    gb[j] = gb[j] + contrib;
                }
                add_into(grads, nodes, *b, gb);
            }
        }
        Op::Unary(op, a) => {
            let av = &nodes[*a].value;
            let out = &node.value;
            let ga = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| match op {
                    UnaryOp::Relu => {
                        if av[i] > S::zero() {
                            gi
                        } else {
                            S::zero()
                        }
                    }
                    UnaryOp::Sigmoid => gi * out[i] * (S::one() - out[i]),
                    UnaryOp::Abs => {
                        if av[i] > S::zero() {
                            gi
                        } else if av[i] < S::zero() {
                            -gi
                        } else {
                            S::zero()
                        }
                    }
                })
                .collect();
            add_into(grads, nodes, *a, ga);
        }
        Op::Scale(a, s) => add_into(grads, nodes, *a, g.iter().map(|&gi| gi * *s).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => add_into(grads, nodes, *a, g.to_vec()),
        Op::Sum(a) => add_into(grads, nodes, *a, vec![g[0]; nodes[*a].value.len()]),
        Op::Mean(a) => {
            let n = nodes[*a].value.len();
            add_into(grads, nodes, *a, vec![g[0] / S::lit(n as f64); n]);
        }
        Op::ConcatCols(parts) => {
            let rows = node.dims[0];
            let total = node.dims[1];
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].dims[1];
                if nodes[p].needs_grad {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    add_into(grads, nodes, p, gp);
                }
                offset += w;
            }
        }
        Op::SliceCols(a, start) => {
            let (rows, cols) = (nodes[*a].dims[0], nodes[*a].dims[1]);
            let w = node.dims[1];
            let mut ga = vec![S::zero(); rows * cols];
            for r in 0..rows {
                ga[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            add_into(grads, nodes, *a, ga);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                add_into(grads, nodes, p, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::SliceRows(a, start) => {
            let cols = nodes[*a].dims[1];
            let mut ga = vec![S::zero(); nodes[*a].value.len()];
            ga[start * cols..start * cols + g.len()].copy_from_slice(g);
            add_into(grads, nodes, *a, ga);
        }
        Op::RowScale(a, w) => {
            let cols = node.dims[1];
            let ga = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi * w[i / cols])
                .collect();
            add_into(grads, nodes, *a, ga);
        }
        Op::SoftmaxRows(a) => {
            let cols = node.dims[1];
            let y = &node.value;
            let mut ga = vec![S::zero(); g.len()];
            for r in 0..node.dims[0] {
                let row = r * cols..(r + 1) * cols;
                let dot: S = g[row.clone()]
                    .iter()
                    .zip(&y[row.clone()])
                    .map(|(&gi, &yi)| gi * yi)
                    .sum();
                for i in row {
                    ga[i] = y[i] * (g[i] - dot);
                }
            }
            add_into(grads, nodes, *a, ga);
        }
        Op::LayerNorm { input, inv_std } => {
            let cols = node.dims[1];
            let xhat = &node.value;
            let n = S::lit(cols as f64);
            let mut ga = vec![S::zero(); g.len()];
            for (r, &is) in inv_std.iter().enumerate() {
                let row = r * cols..(r + 1) * cols;
                let mean_g: S = g[row.clone()].iter().copied().sum::<S>() / n;
                let mean_gx: S = g[row.clone()]
                    .iter()
                    .zip(&xhat[row.clone()])
                    .map(|(&gi, &xi)| gi * xi)
                    .sum::<S>()
                    / n;
                for i in row {
                    ga[i] = is * (g[i] - mean_g - xhat[i] * mean_gx);
                }
            }
            add_into(grads, nodes, *input, ga);
        }
        Op::Custom(inputs, op) => {
            let values: Vec<&[S]> = inputs.iter().map(|&i| &*nodes[i].value).collect();
            let gs = op.backward(&values, &node.value, g);
            for (&i, gi) in inputs.iter().zip(gs) {
                add_into(grads, nodes, i, gi);
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<S> {
    by_tensor: HashMap<TensorId, Vec<S>>,
    by_node: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a tape value, if it was reached.
    pub fn wrt(&self, v: Var<'_, S>) -> Option<&[S]> {
        self.by_node.get(v.idx).and_then(|g| g.as_deref())
    }

    pub fn for_tensor(&self, id: TensorId) -> Option<&[S]> {
        self.by_tensor.get(&id).map(Vec::as_slice)
    }

    /// Adds this sweep's gradient into `t` (no-op if `t` was not reached).
    pub fn accumulate_into(&self, t: &mut Tensor<S>) -> Result<()> {
        if !t.requires_grad() {
            return Ok(());
        }
        match self.by_tensor.get(&t.id()) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    fn node_value(&self) -> Rc<[S]> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].dims.clone()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].dims[0]
    }

    pub fn cols(&self) -> usize {
        *self.tape.nodes.borrow()[self.idx]
            .dims
            .last()
            .expect("dims")
    }

    pub fn value(&self) -> Vec<S> {
        self.node_value().to_vec()
    }

    /// Shared view of the value without copying.
    pub fn value_rc(&self) -> Rc<[S]> {
        self.node_value()
    }

    pub fn scalar(&self) -> S {
        self.node_value()[0]
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].needs_grad
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(&self.dims(), self.value(), false).expect("tape node is consistent")
    }

    fn record(
        &self,
        dims: Vec<usize>,
        value: Vec<S>,
        op: Op<S>,
        inputs: &[&Var<'t, S>],
    ) -> Var<'t, S> {
        let ng = inputs.iter().any(|v| v.needs_grad());
        self.tape.push(dims, value, op, ng, None)
    }

    fn mat_dims(&self, what: &str) -> Result<(usize, usize)> {
        let d = self.dims();
        if d.len() != 2 {
            return Err(Error::shape(format!("{what} needs a matrix, got {d:?}")));
        }
        Ok((d[0], d[1]))
    }

    pub fn matmul(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (m, k) = self.mat_dims("matmul")?;
        let (k2, n) = other.mat_dims("matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(&self.node_value(), &other.node_value(), &mut out, m, k, n);
        Ok(self.record(
            vec![m, n],
            out,
            Op::MatMul(self.idx, other.idx),
            &[self, &other],
        ))
    }

    /// `self · otherᵀ`; `other` is `[n, k]`.
    pub fn matmul_nt(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (m, k) = self.mat_dims("matmul_nt")?;
        let (n, k2) = other.mat_dims("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt inner extents {k} vs {k2}")));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_nt_acc(&self.node_value(), &other.node_value(), &mut out, m, k, n);
        Ok(self.record(
            vec![m, n],
            out,
            Op::MatMulNt(self.idx, other.idx),
            &[self, &other],
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t, S>> {
        let (m, n) = self.mat_dims("transpose")?;
        let out = kernels::transpose(&self.node_value(), m, n);
        Ok(self.record(vec![n, m], out, Op::Transpose(self.idx), &[self]))
    }

    /// Elementwise binary op. `other` may be a `[1, c]` (or `[c]`) row
    /// broadcast over an `[n, c]` matrix.
    pub fn binary(&self, op: BinaryOp, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let da = self.dims();
        let db = other.dims();
        let bcast = if da == db {
            false
        } else {
            let row_like = (db.len() == 2 && db[0] == 1) || db.len() == 1;
            let c = *db.last().expect("dims");
            if da.len() == 2 && row_like && da[1] == c {
                true
            } else {
                return Err(Error::shape(format!("cannot broadcast {db:?} over {da:?}")));
            }
        };
        let av = self.node_value();
        let bv = other.node_value();
        let cols = bv.len();
        let out = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[if bcast { i % cols } else { i }];
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
            .collect();
        Ok(self.record(
            da,
            out,
            Op::Binary(op, self.idx, other.idx, bcast),
            &[self, &other],
        ))
    }

    pub fn add(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn unary(&self, op: UnaryOp) -> Var<'t, S> {
        let out = self
            .node_value()
            .iter()
            .map(|&x| match op {
                UnaryOp::Relu => x.max(S::zero()),
                UnaryOp::Sigmoid => sigmoid(x),
                UnaryOp::Abs => x.abs(),
            })
            .collect();
        self.record(self.dims(), out, Op::Unary(op, self.idx), &[self])
    }

    pub fn relu(&self) -> Var<'t, S> {
        self.unary(UnaryOp::Relu)
    }

    pub fn sigmoid(&self) -> Var<'t, S> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn abs(&self) -> Var<'t, S> {
        self.unary(UnaryOp::Abs)
    }

    pub fn scale(&self, s: S) -> Var<'t, S> {
        let out = self.node_value().iter().map(|&x| x * s).collect();
        self.record(self.dims(), out, Op::Scale(self.idx, s), &[self])
    }

    pub fn add_scalar(&self, s: S) -> Var<'t, S> {
        let out = self.node_value().iter().map(|&x| x + s).collect();
        self.record(self.dims(), out, Op::AddScalar(self.idx), &[self])
    }

    pub fn sum(&self) -> Var<'t, S> {
        let total = self.node_value().iter().copied().sum();
        self.record(vec![1], vec![total], Op::Sum(self.idx), &[self])
    }

    pub fn mean(&self) -> Var<'t, S> {
        let v = self.node_value();
        let total: S = v.iter().copied().sum();
        let mean = total / S::lit(v.len() as f64);
        self.record(vec![1], vec![mean], Op::Mean(self.idx), &[self])
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Var<'t, S>> {
        let len = checked_len(dims)?;
        let v = self.node_value();
        if len != v.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims()
            )));
        }
        Ok(self.record(dims.to_vec(), v.to_vec(), Op::Reshape(self.idx), &[self]))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t, S>> {
        let (rows, cols) = self.mat_dims("slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::shape(format!(
                "column range {start}..{end} of {cols}"
            )));
        }
        let v = self.node_value();
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        Ok(self.record(vec![rows, w], out, Op::SliceCols(self.idx, start), &[self]))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t, S>> {
        let (rows, cols) = self.mat_dims("slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::shape(format!("row range {start}..{end} of {rows}")));
        }
        let out = self.node_value()[start * cols..end * cols].to_vec();
        Ok(self.record(
            vec![end - start, cols],
            out,
            Op::SliceRows(self.idx, start),
            &[self],
        ))
    }

    /// Multiplies row `r` by the constant `weights[r]`; gradients pass
    /// through the rows only, never into the weights.
    pub fn row_scale(&self, weights: &[S]) -> Result<Var<'t, S>> {
        let (rows, cols) = self.mat_dims("row_scale")?;
        if weights.len() != rows {
            return Err(Error::shape(format!(
                "{} row weights for {rows} rows",
                weights.len()
            )));
        }
        let v = self.node_value();
        let out = v
            .iter()
            .enumerate()
            .map(|(i, &x)| x * weights[i / cols])
            .collect();
        let w: Rc<[S]> = weights.to_vec().into();
        Ok(self.record(vec![rows, cols], out, Op::RowScale(self.idx, w), &[self]))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t, S>> {
        let (rows, cols) = self.mat_dims("softmax_rows")?;
        let v = self.node_value();
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (x - m).exp();
                z = z + *o;
            }
            out[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|o| *o = *o / z);
        }
        Ok(self.record(vec![rows, cols], out, Op::SoftmaxRows(self.idx), &[self]))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&self, eps: S) -> Result<Var<'t, S>> {
        let (rows, cols) = self.mat_dims("layer_norm")?;
        let v = self.node_value();
        let n = S::lit(cols as f64);
        let mut out = vec![S::zero(); rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(self.record(
            vec![rows, cols],
            out,
            Op::LayerNorm {
                input: self.idx,
                inv_std,
            },
            &[self],
        ))
    }
}

/// Column-wise concatenation of `[n, c_i]` parts into `[n, Σ c_i]`.
pub fn concat_cols<'t, S: Scalar>(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero parts"))?;
    let rows = first.mat_dims("concat_cols")?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.mat_dims("concat_cols")?;
        if r != rows {
            return Err(Error::shape(format!(
                "concat_cols leading extents {rows} vs {r}"
            )));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let values: Vec<Rc<[S]>> = parts.iter().map(|p| p.node_value()).collect();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v[r * w..(r + 1) * w]);
        }
    }
    let refs: Vec<&Var<'t, S>> = parts.iter().collect();
    Ok(first.record(
        vec![rows, total],
        out,
        Op::ConcatCols(parts.iter().map(|p| p.idx).collect()),
        &refs,
    ))
}

/// Row-wise concatenation of `[n_i, c]` parts into `[Σ n_i, c]`.
pub fn concat_rows<'t, S: Scalar>(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero parts"))?;
    let cols = first.mat_dims("concat_rows")?.1;
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        let (r, c) = p.mat_dims("concat_rows")?;
        if c != cols {
            return Err(Error::shape(format!("concat_rows widths {cols} vs {c}")));
        }
        rows += r;
        out.extend_from_slice(&p.node_value());
    }
    let refs: Vec<&Var<'t, S>> = parts.iter().collect();
    Ok(first.record(
        vec![rows, cols],
        out,
        Op::ConcatRows(parts.iter().map(|p| p.idx).collect()),
        &refs,
    ))
}
