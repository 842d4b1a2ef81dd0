//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation as a
//! node. [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every parameter that was read.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{self, matmul_nt_acc, matmul_tn_acc, sigmoid_scalar, Tensor};
use crate::crf;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Adds a `1 × n` row to every row.
    AddRow(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    OneMinus(NodeId),
    Scale(NodeId, f64),
    Rows(NodeId, usize),
    Cols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    /// Fused CRF negative log-likelihood; caches `∂/∂P` and `∂/∂A`.
    CrfNll {
        emissions: NodeId,
        transitions: NodeId,
        d_emissions: Tensor,
        d_transitions: Tensor,
    },
    /// Fused per-token softmax cross-entropy, summed over tokens.
    SoftmaxXent { logits: NodeId, d_logits: Tensor },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient outside the graph.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// The node reading parameter `id`. Repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", x.shape(), r.shape())));
        }
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = tensor::sigmoid(self.value(a));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = tensor::tanh(self.value(a));
        self.push(v, Op::Tanh(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Rows `[start, start + len)`.
    pub fn rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(Error::Shape(format!("rows {start}..{} of {:?}", start + len, x.shape())));
        }
        let v = x.slice_rows(start, len);
        Ok(self.push(v, Op::Rows(a, start)))
    }

    /// Columns `[start, start + len)`.
    pub fn cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(Error::Shape(format!("cols {start}..{} of {:?}", start + len, x.shape())));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = Tensor::new(x.rows(), len, data)?;
        Ok(self.push(v, Op::Cols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// CRF negative log-likelihood of `gold` given `m × T` emissions and a
    /// `(T+2) × (T+2)` transition matrix.
    pub fn crf_nll(&mut self, emissions: NodeId, transitions: NodeId, gold: &[usize]) -> Result<NodeId> {
        let (p, a) = (self.value(emissions), self.value(transitions));
        let score = crf::sequence_score(p, a, gold)?;
        let mg = crf::marginals(p, a)?;
        let mut d_emissions = mg.unary;
        let mut d_transitions = mg.transitions;
        let t = p.cols();
        let mut prev = t;
        for (i, &y) in gold.iter().enumerate() {
            d_emissions.set(i, y, d_emissions.get(i, y) - 1.0);
            d_transitions.set(prev, y, d_transitions.get(prev, y) - 1.0);
            prev = y;
        }
        d_transitions.set(prev, t + 1, d_transitions.get(prev, t + 1) - 1.0);
        let v = Tensor::scalar(mg.log_partition - score);
        Ok(self.push(
            v,
            Op::CrfNll {
                emissions,
                transitions,
                d_emissions,
                d_transitions,
            },
        ))
    }

    /// `Σ_i −log softmax(logits_i)[gold_i]`.
    pub fn softmax_xent(&mut self, logits: NodeId, gold: &[usize]) -> Result<NodeId> {
        let x = self.value(logits);
        if gold.len() != x.rows() {
            return Err(Error::Shape(format!("{} labels for {} rows", gold.len(), x.rows())));
        }
        let mut d = Tensor::zeros(x.rows(), x.cols());
        let mut loss = 0.0;
        for (i, &y) in gold.iter().enumerate() {
            if y >= x.cols() {
                return Err(Error::Shape(format!("label {y} out of range")));
            }
            let row = x.row(i);
            let lse = tensor::log_sum_exp(row);
            loss += lse - row[y];
            for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
                *dv = (row[j] - lse).exp();
            }
            d.set(i, y, d.get(i, y) - 1.0);
        }
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, d_logits: d }))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Invalid("backward called on a node that was never recorded".into()));
        }
        let out = self.value(loss);
        if out.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", out.shape())));
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut param_grads = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => param_grads.get_mut(*p).add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let ga = self.grad_buf(&mut grads, *a);
                    matmul_nt_acc(ga.data_mut(), g.data(), bv.data(), m, n, k);
                    let gb = self.grad_buf(&mut grads, *b);
                    matmul_tn_acc(gb.data_mut(), av.data(), g.data(), m, k, n);
                }
                Op::Add(a, b) => {
                    self.grad_buf(&mut grads, *a).add_assign(&g);
                    self.grad_buf(&mut grads, *b).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    self.grad_buf(&mut grads, *a).add_assign(&g);
                    let gb = self.grad_buf(&mut grads, *b);
                    for (o, x) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = self.grad_buf(&mut grads, *a);
                    for ((o, x), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += x * y;
                    }
                    let gb = self.grad_buf(&mut grads, *b);
                    for ((o, x), y) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += x * y;
                    }
                }
                Op::AddRow(a, row) => {
                    self.grad_buf(&mut grads, *a).add_assign(&g);
                    let gr = self.grad_buf(&mut grads, *row);
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("computed");
                    let ga = self.grad_buf(&mut grads, *a);
                    for ((o, x), s) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += x * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("computed");
                    let ga = self.grad_buf(&mut grads, *a);
                    for ((o, x), t) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += x * (1.0 - t * t);
                    }
                }
                Op::OneMinus(a) => {
                    let ga = self.grad_buf(&mut grads, *a);
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o -= x;
                    }
                }
                Op::Scale(a, s) => {
                    let ga = self.grad_buf(&mut grads, *a);
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += s * x;
                    }
                }
                Op::Rows(a, start) => {
                    let cols = g.cols();
                    let ga = self.grad_buf(&mut grads, *a);
                    let dst = &mut ga.data_mut()[start * cols..(start + g.rows()) * cols];
                    for (o, x) in dst.iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
                Op::Cols(a, start) => {
                    let ga = self.grad_buf(&mut grads, *a);
                    for r in 0..g.rows() {
                        let dst = &mut ga.row_mut(r)[*start..*start + g.cols()];
                        for (o, x) in dst.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let gp = self.grad_buf(&mut grads, *p);
                        for r in 0..g.rows() {
                            for (o, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *o += x;
                            }
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        let gp = self.grad_buf(&mut grads, *p);
                        for (o, x) in gp.data_mut().iter_mut().zip(&g.data()[offset * cols..(offset + h) * cols]) {
                            *o += x;
                        }
                        offset += h;
                    }
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let ga = self.grad_buf(&mut grads, *a);
                    for o in ga.data_mut() {
                        *o += s;
                    }
                }
                Op::CrfNll {
                    emissions,
                    transitions,
                    d_emissions,
                    d_transitions,
                } => {
                    let s = g.data()[0];
                    add_scaled(self.grad_buf(&mut grads, *emissions), d_emissions, s);
                    add_scaled(self.grad_buf(&mut grads, *transitions), d_transitions, s);
                }
                Op::SoftmaxXent { logits, d_logits } => {
                    let s = g.data()[0];
                    add_scaled(self.grad_buf(&mut grads, *logits), d_logits, s);
                }
            }
        }
        Ok(param_grads)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> &'g mut Tensor {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            let v = self.value(id);
            *slot = Some(Tensor::zeros(v.rows(), v.cols()));
        }
        slot.as_mut().expect("initialized")
    }
}

fn add_scaled(dst: &mut Tensor, src: &Tensor, s: f64) {
    for (o, x) in dst.data_mut().iter_mut().zip(src.data()) {
        *o += s * x;
    }
}

/// Derivative of the logistic function at `x`.
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 - s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let mut g = Graph::new(&store);
        let xn = g.param(x);
        let y = g.mul(xn, xn).unwrap();
        assert_eq!(g.value(y).as_scalar().unwrap(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).as_scalar().unwrap(), 6.0);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        assert_eq!(sigmoid_grad(0.0), 0.25);
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(0.0));
        let mut g = Graph::new(&store);
        let xn = g.param(x);
        let s = g.sigmoid(xn);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).as_scalar().unwrap(), 0.25);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::row_vector(vec![1.0, 2.0]));
        let unused = store.add("unused", Tensor::row_vector(vec![5.0, 6.0]));
        let mut g = Graph::new(&store);
        let u = g.param(used);
        let t = g.tanh(u);
        let s = g.sum(t);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).data().iter().all(|&v| v == 0.0));
        assert!(grads.get(used).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn backward_requires_recorded_scalar() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        assert!(g.backward(NodeId(0)).is_err());
        let mut g = Graph::new(&store);
        let v = g.input(Tensor::zeros(2, 2));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn shape_errors_surface() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(2, 3));
        let b = g.input(Tensor::zeros(2, 3));
        assert!(g.matmul(a, b).is_err());
        let c = g.input(Tensor::zeros(1, 2));
        assert!(g.add(a, c).is_err());
        assert!(g.add_row(a, c).is_err());
        assert!(g.rows(a, 1, 2).is_err());
    }
}
