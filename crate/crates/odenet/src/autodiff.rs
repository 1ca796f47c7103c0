//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records a dynamically built graph of primitive ops; `backward`
//! walks it once in reverse and accumulates gradients for every node. Only
//! first-order derivatives are supported. Recording is confined to one
//! logical execution context; evaluated tensors are immutable.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

use crate::tensor::{self, Tensor, TensorError};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AdError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("vars from different tapes combined in one op")]
    TapeMismatch,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("duplicate parameter name: {0}")]
    DuplicateName(String),
    #[error("unknown parameter name: {0}")]
    UnknownName(String),
}

/// Ordered, uniquely named collection of tensors (or tape vars).
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct ParamStore<T = Tensor> {
    entries: Vec<(String, T)>,
}

impl<T> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: T) -> Result<(), AdError> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(AdError::DuplicateName(name));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&T> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut T> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn set(&mut self, name: &str, value: T) -> Result<(), AdError> {
        match self.get_mut(name) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(AdError::UnknownName(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &T)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut T)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), f(n, v)))
                .collect(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    SubRow(usize, usize),
    MulRow(usize, usize),
    Relu(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Rsqrt(usize),
    MeanRows(usize),
    Sum(usize),
    Segment {
        src: usize,
        start: usize,
    },
    Reshape(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

/// Handle to one tensor on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    index: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self.clone(),
            index: nodes.len() - 1,
        }
    }

    /// Record a leaf. Gradients accumulate for every leaf; callers decide
    /// which ones they read back.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar loss; returns per-node gradients.
    pub fn backward(&self, loss: &Var) -> Result<Gradients, AdError> {
        if !Rc::ptr_eq(&self.nodes, &loss.tape.nodes) {
            return Err(AdError::TapeMismatch);
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.index];
        if loss_node.value.len() != 1 {
            return Err(AdError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.index] = Some(Tensor::from_vec(
            loss_node.value.shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..=loss.index).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = tensor::matmul_nt(&g, &nodes[*b].value)?;
                    let gb = tensor::matmul_tn(&nodes[*a].value, &g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, tensor::scale(&g, -1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = tensor::mul(&g, &nodes[*b].value)?;
                    let gb = tensor::mul(&g, &nodes[*a].value)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, col_sum(&g)?)?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::SubRow(a, row) => {
                    accumulate(&mut grads, *row, tensor::scale(&col_sum(&g)?, -1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::MulRow(a, row) => {
                    let ga = tensor::mul_row(&g, &nodes[*row].value)?;
                    let grow = col_sum(&tensor::mul(&g, &nodes[*a].value)?)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *row, grow)?;
                }
                Op::Relu(a) => {
                    let av = &nodes[*a].value;
                    let mut ga = g.clone();
                    for (gx, x) in ga.data_mut().iter_mut().zip(av.data()) {
                        if *x <= 0.0 {
                            *gx = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, tensor::scale(&g, *c))?;
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Rsqrt(a) => {
                    // y = x^{-1/2}, dy/dx = -y^3 / 2
                    let y = &node.value;
                    let mut ga = g.clone();
                    for (gx, yv) in ga.data_mut().iter_mut().zip(y.data()) {
                        *gx *= -0.5 * yv * yv * yv;
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::MeanRows(a) => {
                    let (n, d) = nodes[*a].value.dims2()?;
                    let mut data = vec![0.0; n * d];
                    for chunk in data.chunks_mut(d) {
                        for (o, gv) in chunk.iter_mut().zip(g.data()) {
                            *o = gv / n as f64;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(vec![n, d], data)?)?;
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    let av = &nodes[*a].value;
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::full(av.shape().to_vec(), gv),
                    )?;
                }
                Op::Segment { src, start } => {
                    let sv = &nodes[*src].value;
                    let mut ga = Tensor::zeros(sv.shape().to_vec());
                    ga.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *src, ga)?;
                }
                Op::Reshape(a) => {
                    let ga = g.reshaped(nodes[*a].value.shape().to_vec())?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let gv = g.data()[0];
                    let probs = tensor::softmax(&nodes[*logits].value)?;
                    let (n, c) = probs.dims2()?;
                    let mut ga = probs;
                    for (row, &label) in ga.data_mut().chunks_mut(c).zip(labels) {
                        row[label] -= 1.0;
                        for x in row.iter_mut() {
                            *x *= gv / n as f64;
                        }
                    }
                    accumulate(&mut grads, *logits, ga)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, g: Tensor) -> Result<(), AdError> {
    match &mut grads[index] {
        Some(existing) => {
            *existing = tensor::add(existing, &g)?;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Sum of a `(n, d)` tensor over the batch axis.
fn col_sum(a: &Tensor) -> Result<Tensor, AdError> {
    let (_, d) = a.dims2()?;
    let mut out = vec![0.0; d];
    for chunk in a.data().chunks(d) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    Ok(Tensor::from_vec(vec![d], out)?)
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var` (zeros if the loss does not depend on it).
    pub fn wrt(&self, var: &Var) -> Tensor {
        match &self.grads[var.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape().to_vec()),
        }
    }
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.index].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.index].value.shape().to_vec()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn same_tape(&self, other: &Var) -> Result<(), AdError> {
        if Rc::ptr_eq(&self.tape.nodes, &other.tape.nodes) {
            Ok(())
        } else {
            Err(AdError::TapeMismatch)
        }
    }

    fn unary(&self, value: Result<Tensor, TensorError>, op: Op) -> Result<Var, AdError> {
        let value = value?;
        debug_check_finite(&value, &op)?;
        Ok(self.tape.push(value, op))
    }

    fn binary(
        &self,
        other: &Var,
        value: Result<Tensor, TensorError>,
        op: Op,
    ) -> Result<Var, AdError> {
        self.same_tape(other)?;
        let value = value?;
        debug_check_finite(&value, &op)?;
        Ok(self.tape.push(value, op))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var, AdError> {
        let v = tensor::matmul(&self.value(), &other.value());
        self.binary(other, v, Op::MatMul(self.index, other.index))
    }

    pub fn add(&self, other: &Var) -> Result<Var, AdError> {
        let v = tensor::add(&self.value(), &other.value());
        self.binary(other, v, Op::Add(self.index, other.index))
    }

    pub fn sub(&self, other: &Var) -> Result<Var, AdError> {
        let v = tensor::sub(&self.value(), &other.value());
        self.binary(other, v, Op::Sub(self.index, other.index))
    }

    pub fn mul(&self, other: &Var) -> Result<Var, AdError> {
        let v = tensor::mul(&self.value(), &other.value());
        self.binary(other, v, Op::Mul(self.index, other.index))
    }

    pub fn add_row(&self, row: &Var) -> Result<Var, AdError> {
        let v = tensor::add_row(&self.value(), &row.value());
        self.binary(row, v, Op::AddRow(self.index, row.index))
    }

    pub fn sub_row(&self, row: &Var) -> Result<Var, AdError> {
        let v = tensor::sub_row(&self.value(), &row.value());
        self.binary(row, v, Op::SubRow(self.index, row.index))
    }

    pub fn mul_row(&self, row: &Var) -> Result<Var, AdError> {
        let v = tensor::mul_row(&self.value(), &row.value());
        self.binary(row, v, Op::MulRow(self.index, row.index))
    }

    pub fn relu(&self) -> Result<Var, AdError> {
        let v = tensor::relu(&self.value());
        self.unary(Ok(v), Op::Relu(self.index))
    }

    pub fn scale(&self, c: f64) -> Result<Var, AdError> {
        let v = tensor::scale(&self.value(), c);
        self.unary(Ok(v), Op::Scale(self.index, c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var, AdError> {
        let v = tensor::add_scalar(&self.value(), c);
        self.unary(Ok(v), Op::AddScalar(self.index))
    }

    pub fn rsqrt(&self) -> Result<Var, AdError> {
        let v = tensor::rsqrt(&self.value());
        self.unary(Ok(v), Op::Rsqrt(self.index))
    }

    /// Per-feature mean over the batch axis: `(n, d) -> (d)`.
    pub fn mean_rows(&self) -> Result<Var, AdError> {
        let v = tensor::mean_rows(&self.value());
        self.unary(v, Op::MeanRows(self.index))
    }

    pub fn sum(&self) -> Result<Var, AdError> {
        let v = tensor::sum(&self.value());
        self.unary(Ok(v), Op::Sum(self.index))
    }

    /// Contiguous slice of a rank-1 tensor.
    pub fn segment(&self, start: usize, len: usize) -> Result<Var, AdError> {
        let value = self.value();
        if value.shape().len() != 1 || start + len > value.len() {
            return Err(AdError::Tensor(TensorError::ShapeMismatch {
                op: "segment",
                lhs: value.shape().to_vec(),
                rhs: vec![start, len],
            }));
        }
        let v = Tensor::from_vec(vec![len], value.data()[start..start + len].to_vec())?;
        self.unary(
            Ok(v),
            Op::Segment {
                src: self.index,
                start,
            },
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var, AdError> {
        let v = self.value().reshaped(shape);
        self.unary(v, Op::Reshape(self.index))
    }

    /// Mean softmax cross-entropy against integer class labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var, AdError> {
        let value = self.value();
        let loss = tensor::softmax_cross_entropy(&value, labels)?;
        self.unary(
            Ok(Tensor::scalar(loss)),
            Op::SoftmaxCrossEntropy {
                logits: self.index,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean per-feature batch statistics `(mean, biased variance)`.
    pub fn batch_stats(&self) -> Result<(Var, Var), AdError> {
        let mean = self.mean_rows()?;
        let centered = self.sub_row(&mean)?;
        let var = centered.mul(&centered)?.mean_rows()?;
        Ok((mean, var))
    }

    /// Affine normalization composite `(x - mean) / sqrt(var + eps) * scale + bias`.
    pub fn affine_normalize(
        &self,
        mean: &Var,
        var: &Var,
        scale: &Var,
        bias: &Var,
        eps: f64,
    ) -> Result<Var, AdError> {
        let inv_std = var.add_scalar(eps)?.rsqrt()?;
        self.sub_row(mean)?
            .mul_row(&inv_std)?
            .mul_row(scale)?
            .add_row(bias)
    }
}

#[cfg(debug_assertions)]
fn debug_check_finite(value: &Tensor, op: &Op) -> Result<(), AdError> {
    if matches!(op, Op::Leaf) {
        return Ok(());
    }
    if !value.all_finite() {
        return Err(AdError::NonFinite {
            op: op_name(op),
        });
    }
    Ok(())
}

#[cfg(not(debug_assertions))]
fn debug_check_finite(_value: &Tensor, _op: &Op) -> Result<(), AdError> {
    Ok(())
}

#[cfg(debug_assertions)]
fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::SubRow(..) => "sub_row",
        Op::MulRow(..) => "mul_row",
        Op::Relu(..) => "relu",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Rsqrt(..) => "rsqrt",
        Op::MeanRows(..) => "mean_rows",
        Op::Sum(..) => "sum",
        Op::Segment { .. } => "segment",
        Op::Reshape(..) => "reshape",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
    }
}

/// Evaluate a scalar computation over `params` and return its value together
/// with gradients for every parameter tensor.
pub fn value_and_grad<E, F>(params: &ParamStore<Tensor>, f: F) -> Result<(f64, ParamStore<Tensor>), E>
where
    E: From<AdError>,
    F: FnOnce(&Tape, &ParamStore<Var>) -> Result<Var, E>,
{
    let tape = Tape::new();
    let vars = params.map(|_, t| tape.leaf(t.clone()));
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let value = loss.value().item().map_err(AdError::from)?;
    let out = vars.map(|_, v| grads.wrt(v));
    Ok((value, out))
}

/// Worst-case relative disagreement between reverse-mode and central
/// finite-difference gradients.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Central-difference check of `f`'s gradient at `params`.
///
/// Relative error uses a floor of 1e-4 in the denominator so near-zero
/// gradient entries compare on an absolute scale.
pub fn finite_diff_check<E, F>(
    params: &ParamStore<Tensor>,
    step: f64,
    f: F,
) -> Result<FiniteDiffReport, E>
where
    E: From<AdError>,
    F: Fn(&Tape, &ParamStore<Var>) -> Result<Var, E>,
{
    let (_, analytic) = value_and_grad(params, &f)?;
    let eval = |p: &ParamStore<Tensor>| -> Result<f64, E> {
        let tape = Tape::new();
        let vars = p.map(|_, t| tape.leaf(t.clone()));
        let loss = f(&tape, &vars)?;
        Ok(loss.value().item().map_err(AdError::from)?)
    };

    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let len = params.get(name).expect("name from iter").len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.get_mut(name).expect("name from iter").data_mut()[i] += step;
            let mut minus = params.clone();
            minus.get_mut(name).expect("name from iter").data_mut()[i] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let g = analytic.get(name).expect("grad present").data()[i];
            let rel = (g - fd).abs() / fd.abs().max(g.abs()).max(1e-4);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
