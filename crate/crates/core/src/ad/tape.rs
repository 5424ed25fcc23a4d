//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation executed through a [`Var`] handle.
//! Calling [`Tape::backward`] on a scalar node walks the record in reverse
//! and accumulates `∂loss/∂leaf` into every leaf created with
//! `requires_grad = true`. Node ids are allocated in execution order, so the
//! record is topologically sorted by construction.

use std::cell::RefCell;

use super::linalg;
use super::sparsemax::sparsemax_vjp;
use super::tensor::{gemm, Tensor};
use super::AdError;

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Neg(usize),
    Tanh(usize),
    Square(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize, Option<usize>),
    Mean(usize, Option<usize>),
    Max(usize, Vec<usize>),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    L2NormRows(usize),
    L1NormRows(usize),
    CholeskyLogdet(usize, Vec<f64>),
    Sparsemax(usize),
    MulRows(usize, usize),
    DivScalar(usize, usize),
    SelectCols(usize, Vec<usize>),
    ConcatCols(usize, usize),
    Clamp(usize, Vec<f64>, Vec<f64>),
    XLogX(usize, f64),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
    pub(crate) leaf_grad: Option<Vec<f64>>,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf. Gradients are accumulated for it only if `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        let id = self.push_node(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            leaf_grad: grad,
        });
        Var { tape: self, id }
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, inputs: &[usize], name: &str) -> Result<usize, AdError> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite(name.to_string()));
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        Ok(self.push_node(Node {
            value,
            op,
            needs_grad,
            leaf_grad: None,
        }))
    }

    /// Accumulated gradient of a leaf, if it requires one.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.leaf_grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    /// Resets every leaf gradient to zero.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            if let Some(g) = node.leaf_grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Propagates `∂loss/∂·` back to every differentiable leaf, adding into
    /// existing leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), AdError> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let leaf_updates = {
            let nodes = self.nodes.borrow();
            if !nodes[loss.id].value.is_scalar() && nodes[loss.id].value.len() != 1 {
                return Err(AdError::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    nodes[loss.id].value.shape()
                )));
            }
            let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
            adj.resize_with(loss.id + 1, || None);
            adj[loss.id] = Some(vec![1.0]);
            let mut leaf_updates = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(g) = adj[id].take() else { continue };
                let node = &nodes[id];
                if !node.needs_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_updates.push((id, g));
                    continue;
                }
                backprop(&nodes, id, &g, &mut adj)?;
            }
            leaf_updates
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_updates {
            if let Some(acc) = nodes[id].leaf_grad.as_mut() {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        if nodes
            .iter()
            .any(|n| n.leaf_grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(AdError::NonFinite("backward".into()));
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}

fn accumulate(nodes: &[Node], adj: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match adj[id].as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => adj[id] = Some(g),
    }
}

/// Reduces a broadcast gradient of shape `[n, d]` to an operand of shape `shape`.
fn unbroadcast(g: Vec<f64>, out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return g;
    }
    let d = shape.iter().product::<usize>();
    let mut r = vec![0.0; d];
    for row in g.chunks(d) {
        r.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    r
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<(), AdError> {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let ga = unbroadcast(g.to_vec(), out.shape(), val(*a).shape());
            let gb = unbroadcast(g.to_vec(), out.shape(), val(*b).shape());
            accumulate(nodes, adj, *a, ga);
            accumulate(nodes, adj, *b, gb);
        }
        Op::Sub(a, b) => {
            let ga = unbroadcast(g.to_vec(), out.shape(), val(*a).shape());
            let gb = unbroadcast(g.iter().map(|v| -v).collect(), out.shape(), val(*b).shape());
            accumulate(nodes, adj, *a, ga);
            accumulate(nodes, adj, *b, gb);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let n = out.len();
            if nodes[*a].needs_grad {
                let ga: Vec<f64> = (0..n).map(|i| g[i] * bv.data()[i % bv.len()]).collect();
                accumulate(nodes, adj, *a, unbroadcast(ga, out.shape(), av.shape()));
            }
            if nodes[*b].needs_grad {
                let gb: Vec<f64> = (0..n).map(|i| g[i] * av.data()[i % av.len()]).collect();
                accumulate(nodes, adj, *b, unbroadcast(gb, out.shape(), bv.shape()));
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[*a].needs_grad {
                accumulate(nodes, adj, *a, gemm(g, (m, n), false, bv.data(), (k, n), true));
            }
            if nodes[*b].needs_grad {
                accumulate(nodes, adj, *b, gemm(av.data(), (m, k), true, g, (m, n), false));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            let mut ga = vec![0.0; g.len()];
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] = g[i * c + j];
                }
            }
            accumulate(nodes, adj, *a, ga);
        }
        Op::Exp(a) => {
            let ga = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
            accumulate(nodes, adj, *a, ga);
        }
        Op::Log(a) => {
            let ga = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
            accumulate(nodes, adj, *a, ga);
        }
        Op::Neg(a) => accumulate(nodes, adj, *a, g.iter().map(|v| -v).collect()),
        Op::Tanh(a) => {
            let ga = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
            accumulate(nodes, adj, *a, ga);
        }
        Op::Square(a) => {
            let ga = g.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
            accumulate(nodes, adj, *a, ga);
        }
        Op::Scale(a, c) => accumulate(nodes, adj, *a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) => accumulate(nodes, adj, *a, g.to_vec()),
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let av = val(*a);
            let mut ga = vec![0.0; av.len()];
            let (r, c) = (av.rows(), av.cols());
            match (av.rank(), axis) {
                (_, None) | (1, Some(0)) | (0, _) => ga.iter_mut().for_each(|v| *v = g[0]),
                (2, Some(0)) => {
                    for i in 0..r {
                        ga[i * c..(i + 1) * c].copy_from_slice(g);
                    }
                }
                (2, Some(1)) => {
                    for i in 0..r {
                        ga[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = g[i]);
                    }
                }
                _ => unreachable!("axis validated at construction"),
            }
            if let Op::Mean(..) = node.op {
                let count = (av.len() / out.len().max(1)) as f64;
                ga.iter_mut().for_each(|v| *v /= count);
            }
            accumulate(nodes, adj, *a, ga);
        }
        Op::Max(a, arg) => {
            let mut ga = vec![0.0; val(*a).len()];
            for (o, &src) in arg.iter().enumerate() {
                ga[src] += g[o];
            }
            accumulate(nodes, adj, *a, ga);
        }
        Op::Relu(a) => {
            let ga = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, adj, *a, ga);
        }
        Op::Softplus(a) => {
            let ga = g.iter().zip(val(*a).data()).map(|(g, x)| g * sigmoid(*x)).collect();
            accumulate(nodes, adj, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
            accumulate(nodes, adj, *a, ga);
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let mut ga = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for j in 0..c {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, adj, *a, ga);
        }
        Op::LogSoftmax(a) => {
            let c = out.cols();
            let mut ga = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                let total: f64 = gr.iter().sum();
                for j in 0..c {
                    dst[j] = gr[j] - yr[j].exp() * total;
                }
            }
            accumulate(nodes, adj, *a, ga);
        }
        Op::L2NormRows(a) => {
            let av = val(*a);
            let c = av.cols();
            let mut ga = vec![0.0; av.len()];
            for (i, (xr, dst)) in av.data().chunks(c).zip(ga.chunks_mut(c)).enumerate() {
                let norm = out.data()[i];
                if norm > 0.0 {
                    for j in 0..c {
                        dst[j] = g[i] * xr[j] / norm;
                    }
                }
            }
            accumulate(nodes, adj, *a, ga);
        }
        Op::L1NormRows(a) => {
            let av = val(*a);
            let c = av.cols();
            let mut ga = vec![0.0; av.len()];
            for (i, (xr, dst)) in av.data().chunks(c).zip(ga.chunks_mut(c)).enumerate() {
                for j in 0..c {
                    dst[j] = g[i] * sign(xr[j]);
                }
            }
            accumulate(nodes, adj, *a, ga);
        }
        Op::CholeskyLogdet(a, inv) => {
            accumulate(nodes, adj, *a, inv.iter().map(|v| v * g[0]).collect());
        }
        Op::Sparsemax(a) => {
            let c = out.cols();
            let mut ga = Vec::with_capacity(g.len());
            for (pr, gr) in out.data().chunks(c).zip(g.chunks(c)) {
                ga.extend(sparsemax_vjp(pr, gr));
            }
            accumulate(nodes, adj, *a, ga);
        }
        Op::MulRows(a, v) => {
            let (av, vv) = (val(*a), val(*v));
            let c = av.cols();
            if nodes[*a].needs_grad {
                let ga = g.iter().enumerate().map(|(i, g)| g * vv.data()[i / c]).collect();
                accumulate(nodes, adj, *a, ga);
            }
            if nodes[*v].needs_grad {
                let gv = g
                    .chunks(c)
                    .zip(av.data().chunks(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(g, x)| g * x).sum())
                    .collect();
                accumulate(nodes, adj, *v, gv);
            }
        }
        Op::DivScalar(a, s) => {
            let sv = val(*s).item();
            if nodes[*a].needs_grad {
                accumulate(nodes, adj, *a, g.iter().map(|g| g / sv).collect());
            }
            if nodes[*s].needs_grad {
                let dot: f64 = g.iter().zip(out.data()).map(|(g, y)| g * y).sum();
                accumulate(nodes, adj, *s, vec![-dot / sv]);
            }
        }
        Op::SelectCols(a, cols) => {
            let av = val(*a);
            let (ac, oc) = (av.cols(), cols.len());
            let mut ga = vec![0.0; av.len()];
            for i in 0..av.rows() {
                for (k, &j) in cols.iter().enumerate() {
                    ga[i * ac + j] += g[i * oc + k];
                }
            }
            accumulate(nodes, adj, *a, ga);
        }
        Op::ConcatCols(a, b) => {
            let (ac, bc) = (val(*a).cols(), val(*b).cols());
            let mut ga = Vec::with_capacity(val(*a).len());
            let mut gb = Vec::with_capacity(val(*b).len());
            for row in g.chunks(ac + bc) {
                ga.extend_from_slice(&row[..ac]);
                gb.extend_from_slice(&row[ac..]);
            }
            accumulate(nodes, adj, *a, ga);
            accumulate(nodes, adj, *b, gb);
        }
        Op::Clamp(a, lo, hi) => {
            let av = val(*a);
            let c = av.cols();
            let ga = g
                .iter()
                .zip(av.data())
                .enumerate()
                .map(|(i, (g, x))| {
                    let j = i % c;
                    if *x >= lo[j] && *x <= hi[j] {
                        *g
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, adj, *a, ga);
        }
        Op::XLogX(a, tiny) => {
            let ga = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| g * ((x + tiny).ln() + x / (x + tiny)))
                .collect();
            accumulate(nodes, adj, *a, ga);
        }
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn cholesky_logdet_forward(m: &Tensor) -> Result<(f64, Vec<f64>), AdError> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return Err(AdError::Shape(format!(
            "logdet needs a square matrix, got {:?}",
            m.shape()
        )));
    }
    let n = m.rows();
    let d = m.data();
    let scale = d.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (d[i * n + j] - d[j * n + i]).abs() > 1e-10 * scale {
                return Err(AdError::Decomposition("matrix is not symmetric".into()));
            }
        }
    }
    let l = linalg::cholesky(d, n)?;
    Ok((
        linalg::logdet_from_cholesky(&l, n),
        linalg::inverse_from_cholesky(&l, n),
    ))
}
