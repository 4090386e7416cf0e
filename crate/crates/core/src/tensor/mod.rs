//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major buffers of a [`Scalar`] type. An op whose inputs
//! are all plain values just computes; as soon as one input is tracked on
//! a [`Graph`], the op is recorded and the result is tracked too. Calling
//! [`backward`] on a scalar loss fills per-node gradients, readable through
//! [`Tensor::grad`] on any tensor of that graph.
//!
//! The op vocabulary is fixed: matmul, add, subtract, elementwise multiply,
//! scalar scale, softmax over the last axis, exp, log, relu, sum, mean,
//! gather-rows, and concat. Everything else in the crate is composed from
//! these.

mod gradcheck;
mod graph;

pub use gradcheck::{finite_difference_grad, within_tolerance, DEFAULT_FD_STEP};
pub use graph::Graph;

use std::rc::Rc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range for axis of size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op} needs at least one input")]
    EmptyInput { op: &'static str },
    #[error("backward requires a scalar loss, got shape {got:?}")]
    NonScalarLoss { got: Vec<usize> },
    #[error("backward requires a loss tensor tracked on a graph")]
    UntrackedLoss,
    #[error("backward already ran on this graph; call zero_grads to reset")]
    BackwardAlreadyRun,
    #[error("op inputs are tracked on different graphs")]
    GraphMismatch,
}

/// Operation kinds accepted by [`Tensor::apply`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Subtract,
    ElementwiseMultiply,
    ScalarScale,
    SoftmaxLastAxis,
    Exp,
    Log,
    Relu,
    Sum,
    Mean,
    GatherRows(Vec<usize>),
    Concat,
}

/// Dense row-major tensor, optionally tracked on an autodiff [`Graph`].
///
/// Cloning is cheap: the value buffer is shared.
#[derive(Clone)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<F>>,
    node: Option<(Graph<F>, usize)>,
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data: Rc::new(data),
            node: None,
        })
    }

    /// 1-D tensor from a plain vector.
    pub fn from_vec(data: Vec<F>) -> Self {
        let shape = vec![data.len()];
        Self {
            shape,
            data: Rc::new(data),
            node: None,
        }
    }

    /// 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::BadShape {
                    op: "from_rows",
                    expected: "rows of equal length",
                    got: vec![rows.len(), row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: Rc::new(vec![F::zero(); n]),
            node: None,
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(v: F) -> Self {
        Self::from_vec(vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.as_ref().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<F, TensorError> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::BadShape {
                op: "item",
                expected: "single element",
                got: self.shape.clone(),
            })
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, no graph reference.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// Mutable access to the value buffer (copy-on-write if shared with a
    /// graph). Drops any graph reference: mutated storage is a new leaf.
    pub fn data_mut(&mut self) -> &mut Vec<F> {
        self.node = None;
        Rc::make_mut(&mut self.data)
    }

    /// Gradient accumulated by the last [`backward`] call, if this tensor
    /// is tracked and participated in the loss.
    pub fn grad(&self) -> Option<Tensor<F>> {
        let (graph, id) = self.node.as_ref()?;
        let g = graph.grad_of(*id)?;
        Some(Tensor {
            shape: self.shape.clone(),
            data: Rc::new(g),
            node: None,
        })
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<F>> {
        Rc::clone(&self.data)
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    pub(crate) fn graph(&self) -> Option<&Graph<F>> {
        self.node.as_ref().map(|(g, _)| g)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Rc<Vec<F>>, node: Option<(Graph<F>, usize)>) -> Self {
        Self { shape, data, node }
    }

    /// Dispatch by op kind; the named methods below are the ergonomic form.
    pub fn apply(op: &OpKind, inputs: &[&Tensor<F>]) -> Result<Tensor<F>, TensorError> {
        let need = |n: usize| -> Result<(), TensorError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(TensorError::EmptyInput { op: "apply" })
            }
        };
        match op {
            OpKind::MatMul => {
                need(2)?;
                inputs[0].matmul(inputs[1])
            }
            OpKind::Add => {
                need(2)?;
                inputs[0].add(inputs[1])
            }
            OpKind::Subtract => {
                need(2)?;
                inputs[0].sub(inputs[1])
            }
            OpKind::ElementwiseMultiply => {
                need(2)?;
                inputs[0].mul(inputs[1])
            }
            OpKind::ScalarScale => {
                need(2)?;
                inputs[0].scale(inputs[1])
            }
            OpKind::SoftmaxLastAxis => {
                need(1)?;
                inputs[0].softmax()
            }
            OpKind::Exp => {
                need(1)?;
                inputs[0].exp()
            }
            OpKind::Log => {
                need(1)?;
                inputs[0].log()
            }
            OpKind::Relu => {
                need(1)?;
                inputs[0].relu()
            }
            OpKind::Sum => {
                need(1)?;
                inputs[0].sum()
            }
            OpKind::Mean => {
                need(1)?;
                inputs[0].mean()
            }
            OpKind::GatherRows(idx) => {
                need(1)?;
                inputs[0].gather_rows(idx)
            }
            OpKind::Concat => Tensor::concat(inputs),
        }
    }

    /// Matrix product: `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        };
        if self.shape.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        match rhs.shape.len() {
            1 => {
                if rhs.shape[0] != k {
                    return Err(mismatch());
                }
                let mut out = vec![F::zero(); m];
                for i in 0..m {
                    let mut acc = F::zero();
                    let row = &self.data[i * k..(i + 1) * k];
                    for (a, x) in row.iter().zip(rhs.data.iter()) {
                        acc += *a * *x;
                    }
                    out[i] = acc;
                }
                record(graph::Op::MatMul, "matmul", &[self, rhs], vec![m], out)
            }
            2 => {
                if rhs.shape[0] != k {
                    return Err(mismatch());
                }
                let n = rhs.shape[1];
                let mut out = vec![F::zero(); m * n];
                for i in 0..m {
                    for p in 0..k {
                        let a = self.data[i * k + p];
                        if a == F::zero() {
                            continue;
                        }
                        let brow = &rhs.data[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for (o, b) in orow.iter_mut().zip(brow.iter()) {
                            *o += a * *b;
                        }
                    }
                }
                record(graph::Op::MatMul, "matmul", &[self, rhs], vec![m, n], out)
            }
            _ => Err(mismatch()),
        }
    }

    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.zip_same_shape("add", rhs, graph::Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.zip_same_shape("subtract", rhs, graph::Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        self.zip_same_shape("elementwise-multiply", rhs, graph::Op::Mul, |a, b| a * b)
    }

    fn zip_same_shape(
        &self,
        name: &'static str,
        rhs: &Tensor<F>,
        op: graph::Op,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>, TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let out: Vec<F> = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(a, b)| f(*a, *b))
            .collect();
        record(op, name, &[self, rhs], self.shape.clone(), out)
    }

    /// Multiply by a single-element tensor. Gradients flow into both the
    /// tensor and the scale.
    pub fn scale(&self, s: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        if s.numel() != 1 {
            return Err(TensorError::BadShape {
                op: "scalar-scale",
                expected: "single-element scale",
                got: s.shape.clone(),
            });
        }
        let c = s.data[0];
        let out: Vec<F> = self.data.iter().map(|a| *a * c).collect();
        record(graph::Op::Scale, "scalar-scale", &[self, s], self.shape.clone(), out)
    }

    /// Multiply by a plain constant (no gradient path through the constant).
    pub fn scale_const(&self, c: F) -> Result<Tensor<F>, TensorError> {
        self.scale(&Tensor::scalar(c))
    }

    /// Numerically stable softmax over the last axis (1-D or 2-D).
    pub fn softmax(&self) -> Result<Tensor<F>, TensorError> {
        let (rows, cols) = self.last_axis_view("softmax-over-last-axis")?;
        let mut out = vec![F::zero(); self.numel()];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
                *o = (*v - max).exp();
                denom += *o;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o = *o / denom;
            }
        }
        record(
            graph::Op::Softmax,
            "softmax-over-last-axis",
            &[self],
            self.shape.clone(),
            out,
        )
    }

    pub fn exp(&self) -> Result<Tensor<F>, TensorError> {
        let out: Vec<F> = self.data.iter().map(|a| a.exp()).collect();
        record(graph::Op::Exp, "exp", &[self], self.shape.clone(), out)
    }

    pub fn log(&self) -> Result<Tensor<F>, TensorError> {
        let out: Vec<F> = self.data.iter().map(|a| a.ln()).collect();
        record(graph::Op::Log, "log", &[self], self.shape.clone(), out)
    }

    pub fn relu(&self) -> Result<Tensor<F>, TensorError> {
        let out: Vec<F> = self.data.iter().map(|a| a.max(F::zero())).collect();
        record(graph::Op::Relu, "relu", &[self], self.shape.clone(), out)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Tensor<F>, TensorError> {
        let mut acc = F::zero();
        for v in self.data.iter() {
            acc += *v;
        }
        record(graph::Op::Sum, "sum", &[self], vec![1], vec![acc])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Result<Tensor<F>, TensorError> {
        if self.numel() == 0 {
            return Err(TensorError::EmptyInput { op: "mean" });
        }
        let mut acc = F::zero();
        for v in self.data.iter() {
            acc += *v;
        }
        let n = F::from_f64(self.numel() as f64);
        record(graph::Op::Mean, "mean", &[self], vec![1], vec![acc / n])
    }

    /// Select elements (1-D) or rows (2-D) by index, in the given order.
    /// Indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<F>, TensorError> {
        match self.shape.len() {
            1 => {
                let n = self.shape[0];
                let mut out = Vec::with_capacity(indices.len());
                for &i in indices {
                    if i >= n {
                        return Err(TensorError::IndexOutOfRange {
                            op: "gather-rows",
                            index: i,
                            size: n,
                        });
                    }
                    out.push(self.data[i]);
                }
                record(
                    graph::Op::GatherRows(indices.to_vec()),
                    "gather-rows",
                    &[self],
                    vec![indices.len()],
                    out,
                )
            }
            2 => {
                let (rows, cols) = (self.shape[0], self.shape[1]);
                let mut out = Vec::with_capacity(indices.len() * cols);
                for &i in indices {
                    if i >= rows {
                        return Err(TensorError::IndexOutOfRange {
                            op: "gather-rows",
                            index: i,
                            size: rows,
                        });
                    }
                    out.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
                }
                record(
                    graph::Op::GatherRows(indices.to_vec()),
                    "gather-rows",
                    &[self],
                    vec![indices.len(), cols],
                    out,
                )
            }
            _ => Err(TensorError::BadShape {
                op: "gather-rows",
                expected: "1-D or 2-D input",
                got: self.shape.clone(),
            }),
        }
    }

    /// Concatenate 1-D tensors end to end, or 2-D tensors along axis 0.
    pub fn concat(parts: &[&Tensor<F>]) -> Result<Tensor<F>, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyInput { op: "concat" })?;
        match first.shape.len() {
            1 => {
                let mut data = Vec::new();
                for p in parts {
                    if p.shape.len() != 1 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            lhs: first.shape.clone(),
                            rhs: p.shape.clone(),
                        });
                    }
                    data.extend_from_slice(&p.data);
                }
                let shape = vec![data.len()];
                record(graph::Op::Concat, "concat", parts, shape, data)
            }
            2 => {
                let cols = first.shape[1];
                let mut rows = 0;
                let mut data = Vec::new();
                for p in parts {
                    if p.shape.len() != 2 || p.shape[1] != cols {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            lhs: first.shape.clone(),
                            rhs: p.shape.clone(),
                        });
                    }
                    rows += p.shape[0];
                    data.extend_from_slice(&p.data);
                }
                record(graph::Op::Concat, "concat", parts, vec![rows, cols], data)
            }
            _ => Err(TensorError::BadShape {
                op: "concat",
                expected: "1-D or 2-D inputs",
                got: first.shape.clone(),
            }),
        }
    }

    /// Run reverse-mode differentiation from this scalar loss.
    pub fn backward(&self) -> Result<(), TensorError> {
        backward(self)
    }

    fn last_axis_view(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(TensorError::BadShape {
                op,
                expected: "1-D or 2-D input",
                got: self.shape.clone(),
            }),
        }
    }
}

/// Fill gradients of every tensor tracked on `loss`'s graph.
///
/// Errors if the loss is not a tracked scalar or if backward already ran
/// on the graph without a reset.
pub fn backward<F: Scalar>(loss: &Tensor<F>) -> Result<(), TensorError> {
    let (graph, id) = loss.node.as_ref().ok_or(TensorError::UntrackedLoss)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            got: loss.shape.clone(),
        });
    }
    graph.run_backward(*id)
}

/// Record the result of an op, tracking it if any input is tracked.
fn record<F: Scalar>(
    op: graph::Op,
    name: &'static str,
    inputs: &[&Tensor<F>],
    shape: Vec<usize>,
    data: Vec<F>,
) -> Result<Tensor<F>, TensorError> {
    let _ = name;
    let mut graph: Option<&Graph<F>> = None;
    for t in inputs {
        if let Some(g) = t.graph() {
            match graph {
                None => graph = Some(g),
                Some(seen) if seen.same_graph(g) => {}
                Some(_) => return Err(TensorError::GraphMismatch),
            }
        }
    }
    let data = Rc::new(data);
    match graph {
        None => Ok(Tensor {
            shape,
            data,
            node: None,
        }),
        Some(g) => {
            let ids: Vec<usize> = inputs
                .iter()
                .map(|t| match t.node_id() {
                    Some(id) => id,
                    None => g.push_constant(t),
                })
                .collect();
            let id = g.push_op(op, &ids, shape.clone(), Rc::clone(&data));
            Ok(Tensor {
                shape,
                data,
                node: Some((g.clone(), id)),
            })
        }
    }
}

#[cfg(test)]
mod tests;
