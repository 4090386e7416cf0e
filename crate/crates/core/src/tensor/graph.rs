//! Autodiff graph: an ordered record of operations plus the backward pass.
//!
//! Nodes are appended in construction order, so the node list is already a
//! topological order (inputs always precede their consumers). Backward
//! walks it once in reverse, accumulating vector-Jacobian products.

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;

use super::{Tensor, TensorError};

/// Recorded operation. Input node ids are stored inline.
#[derive(Clone, Debug)]
pub(super) enum Op {
    Leaf { requires_grad: bool },
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Softmax,
    Exp,
    Log,
    Relu,
    Sum,
    Mean,
    GatherRows(Vec<usize>),
    Concat,
}

struct Node<F: Scalar> {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Rc<Vec<F>>,
    grad: Option<Vec<F>>,
}

struct GraphInner<F: Scalar> {
    nodes: Vec<Node<F>>,
    backward_run: bool,
}

/// Shared handle to one autodiff graph. Construction and backward are
/// single-threaded per graph; distinct graphs are independent.
pub struct Graph<F: Scalar> {
    inner: Rc<RefCell<GraphInner<F>>>,
}

impl<F: Scalar> Clone for Graph<F> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                backward_run: false,
            })),
        }
    }

    /// Register a trainable leaf sharing the tensor's value buffer.
    pub fn var(&self, t: &Tensor<F>) -> Tensor<F> {
        let id = self.push_leaf(t, true);
        Tensor::from_parts(t.shape().to_vec(), t.data_rc(), Some((self.clone(), id)))
    }

    /// Register a constant leaf (participates in forward, receives no
    /// gradient of interest).
    pub fn constant(&self, t: &Tensor<F>) -> Tensor<F> {
        let id = self.push_leaf(t, false);
        Tensor::from_parts(t.shape().to_vec(), t.data_rc(), Some((self.clone(), id)))
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn backward_has_run(&self) -> bool {
        self.inner.borrow().backward_run
    }

    /// Clear all gradients and allow a new backward pass.
    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.backward_run = false;
        for node in &mut inner.nodes {
            node.grad = None;
        }
    }

    pub(super) fn same_graph(&self, other: &Graph<F>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push_leaf(&self, t: &Tensor<F>, requires_grad: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op: Op::Leaf { requires_grad },
            inputs: Vec::new(),
            shape: t.shape().to_vec(),
            value: t.data_rc(),
            grad: None,
        });
        inner.nodes.len() - 1
    }

    pub(super) fn push_constant(&self, t: &Tensor<F>) -> usize {
        self.push_leaf(t, false)
    }

    pub(super) fn push_op(
        &self,
        op: Op,
        inputs: &[usize],
        shape: Vec<usize>,
        value: Rc<Vec<F>>,
    ) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            shape,
            value,
            grad: None,
        });
        inner.nodes.len() - 1
    }

    pub(super) fn grad_of(&self, id: usize) -> Option<Vec<F>> {
        let inner = self.inner.borrow();
        inner.nodes.get(id).and_then(|n| n.grad.clone())
    }

    pub(super) fn run_backward(&self, loss_id: usize) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        if inner.backward_run {
            return Err(TensorError::BackwardAlreadyRun);
        }
        inner.backward_run = true;

        for node in inner.nodes[..=loss_id].iter_mut() {
            node.grad = Some(vec![F::zero(); node.value.len()]);
        }
        inner.nodes[loss_id]
            .grad
            .as_mut()
            .expect("just allocated")[0] = F::one();

        for id in (0..=loss_id).rev() {
            let (op, inputs, shape, value, out_grad) = {
                let node = &inner.nodes[id];
                (
                    node.op.clone(),
                    node.inputs.clone(),
                    node.shape.clone(),
                    Rc::clone(&node.value),
                    node.grad.clone().expect("allocated above"),
                )
            };
            propagate(&mut inner.nodes, &op, &inputs, &shape, &value, &out_grad);
        }
        Ok(())
    }
}

fn add_into<F: Scalar>(nodes: &mut [Node<F>], id: usize, contribution: &[F]) {
    let grad = nodes[id].grad.as_mut().expect("grad allocated");
    for (g, c) in grad.iter_mut().zip(contribution.iter()) {
        *g += *c;
    }
}

fn input_value<F: Scalar>(nodes: &[Node<F>], id: usize) -> (Rc<Vec<F>>, Vec<usize>) {
    (Rc::clone(&nodes[id].value), nodes[id].shape.clone())
}

fn propagate<F: Scalar>(
    nodes: &mut [Node<F>],
    op: &Op,
    inputs: &[usize],
    out_shape: &[usize],
    out_value: &Rc<Vec<F>>,
    og: &[F],
) {
    match op {
        Op::Leaf { .. } => {}
        Op::MatMul => {
            let (a_val, a_shape) = input_value(nodes, inputs[0]);
            let (b_val, b_shape) = input_value(nodes, inputs[1]);
            let (m, k) = (a_shape[0], a_shape[1]);
            if b_shape.len() == 1 {
                // y[m] = A[m,k] x[k]
                let mut da = vec![F::zero(); m * k];
                let mut dx = vec![F::zero(); k];
                for i in 0..m {
                    let gi = og[i];
                    if gi == F::zero() {
                        continue;
                    }
                    for j in 0..k {
                        da[i * k + j] += gi * b_val[j];
                        dx[j] += a_val[i * k + j] * gi;
                    }
                }
                add_into(nodes, inputs[0], &da);
                add_into(nodes, inputs[1], &dx);
            } else {
                // Y[m,n] = A[m,k] B[k,n]
                let n = b_shape[1];
                let mut da = vec![F::zero(); m * k];
                let mut db = vec![F::zero(); k * n];
                for i in 0..m {
                    for j in 0..k {
                        let mut acc = F::zero();
                        for l in 0..n {
                            acc += og[i * n + l] * b_val[j * n + l];
                        }
                        da[i * k + j] = acc;
                    }
                }
                for j in 0..k {
                    for l in 0..n {
                        let mut acc = F::zero();
                        for i in 0..m {
                            acc += a_val[i * k + j] * og[i * n + l];
                        }
                        db[j * n + l] = acc;
                    }
                }
                add_into(nodes, inputs[0], &da);
                add_into(nodes, inputs[1], &db);
            }
        }
        Op::Add => {
            add_into(nodes, inputs[0], og);
            add_into(nodes, inputs[1], og);
        }
        Op::Sub => {
            add_into(nodes, inputs[0], og);
            let neg: Vec<F> = og.iter().map(|g| -*g).collect();
            add_into(nodes, inputs[1], &neg);
        }
        Op::Mul => {
            let (a_val, _) = input_value(nodes, inputs[0]);
            let (b_val, _) = input_value(nodes, inputs[1]);
            let da: Vec<F> = og.iter().zip(b_val.iter()).map(|(g, b)| *g * *b).collect();
            let db: Vec<F> = og.iter().zip(a_val.iter()).map(|(g, a)| *g * *a).collect();
            add_into(nodes, inputs[0], &da);
            add_into(nodes, inputs[1], &db);
        }
        Op::Scale => {
            let (t_val, _) = input_value(nodes, inputs[0]);
            let (s_val, _) = input_value(nodes, inputs[1]);
            let c = s_val[0];
            let dt: Vec<F> = og.iter().map(|g| *g * c).collect();
            let mut ds = F::zero();
            for (g, t) in og.iter().zip(t_val.iter()) {
                ds += *g * *t;
            }
            add_into(nodes, inputs[0], &dt);
            add_into(nodes, inputs[1], &[ds]);
        }
        Op::Softmax => {
            // dz_i = y_i (og_i - sum_j og_j y_j), per row of the last axis.
            let y = out_value;
            let cols = *out_shape.last().unwrap_or(&1);
            let rows = if cols == 0 { 0 } else { y.len() / cols };
            let mut dz = vec![F::zero(); y.len()];
            for r in 0..rows {
                let o = r * cols;
                let mut dot = F::zero();
                for c in 0..cols {
                    dot += og[o + c] * y[o + c];
                }
                for c in 0..cols {
                    dz[o + c] = y[o + c] * (og[o + c] - dot);
                }
            }
            add_into(nodes, inputs[0], &dz);
        }
        Op::Exp => {
            let dx: Vec<F> = og
                .iter()
                .zip(out_value.iter())
                .map(|(g, y)| *g * *y)
                .collect();
            add_into(nodes, inputs[0], &dx);
        }
        Op::Log => {
            let (x_val, _) = input_value(nodes, inputs[0]);
            let dx: Vec<F> = og
                .iter()
                .zip(x_val.iter())
                .map(|(g, x)| *g / *x)
                .collect();
            add_into(nodes, inputs[0], &dx);
        }
        Op::Relu => {
            let (x_val, _) = input_value(nodes, inputs[0]);
            let dx: Vec<F> = og
                .iter()
                .zip(x_val.iter())
                .map(|(g, x)| if *x > F::zero() { *g } else { F::zero() })
                .collect();
            add_into(nodes, inputs[0], &dx);
        }
        Op::Sum => {
            let n = nodes[inputs[0]].value.len();
            let dx = vec![og[0]; n];
            add_into(nodes, inputs[0], &dx);
        }
        Op::Mean => {
            let n = nodes[inputs[0]].value.len();
            let scale = og[0] / F::from_f64(n as f64);
            let dx = vec![scale; n];
            add_into(nodes, inputs[0], &dx);
        }
        Op::GatherRows(indices) => {
            let (_, in_shape) = input_value(nodes, inputs[0]);
            let cols = if in_shape.len() == 2 { in_shape[1] } else { 1 };
            let mut dx = vec![F::zero(); nodes[inputs[0]].value.len()];
            for (j, &src) in indices.iter().enumerate() {
                for c in 0..cols {
                    dx[src * cols + c] += og[j * cols + c];
                }
            }
            add_into(nodes, inputs[0], &dx);
        }
        Op::Concat => {
            let mut offset = 0;
            for &input in inputs {
                let len = nodes[input].value.len();
                let slice = og[offset..offset + len].to_vec();
                add_into(nodes, input, &slice);
                offset += len;
            }
        }
    }
}
