//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse creation
//! order and accumulates vector-Jacobian products into a [`Gradients`] map.
//! [`Tape::grad_graph`] does the same but records the backward computation
//! on the tape itself, so the resulting gradients can be differentiated
//! again (needed by the discriminator gradient penalty).
//!
//! Noise enters through [`Var::gaussian_reparam`], which treats the draw as
//! a constant so gradients flow to the mean and scale only.

mod backward;
mod check;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use backward::Gradients;
pub use check::{finite_diff_check, relative_error, Composite};

/// A primitive whose vector-Jacobian product is supplied by the caller.
///
/// Used for operator-dependent maps (Fourier solves, structured noise)
/// that live outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient contributions for each input given the upstream gradient
    /// `grad` of the output. `None` means no dependence.
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    /// tensor times a one-element node
    MulScalar(usize, usize),
    Exp(usize),
    Sqrt(usize),
    Recip(usize),
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    /// input, threshold (one-element node)
    SoftThreshold(usize, usize),
    L1Sum(usize),
    SqL2Sum(usize),
    Sum(usize),
    Mean(usize),
    MatVec(usize, usize),
    MatMul(usize, usize),
    Outer(usize, usize),
    Transpose(usize),
    AddRowBias(usize, usize),
    BroadcastRows(usize),
    ColSum(usize),
    RowSqSum(usize),
    SliceCols(usize, usize, usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
    Reshape(usize),
    Broadcast(usize),
    GaussianReparam {
        mean: usize,
        scale: usize,
        noise: Rc<Tensor>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Rc<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "elementwise-multiply",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::SoftThreshold(..) => "soft_threshold",
            Op::L1Sum(..) => "l1_sum",
            Op::SqL2Sum(..) => "sq_l2_sum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MatVec(..) => "matvec",
            Op::MatMul(..) => "matmul",
            Op::Outer(..) => "outer",
            Op::Transpose(..) => "transpose",
            Op::AddRowBias(..) => "add_row_bias",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::ColSum(..) => "col_sum",
            Op::RowSqSum(..) => "row_sq_sum",
            Op::SliceCols(..) => "slice_cols",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
            Op::Broadcast(..) => "broadcast",
            Op::GaussianReparam { .. } => "gaussian_reparam",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::SoftThreshold(a, b)
            | Op::MatVec(a, b)
            | Op::MatMul(a, b)
            | Op::Outer(a, b)
            | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::L1Sum(a)
            | Op::SqL2Sum(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::BroadcastRows(a)
            | Op::ColSum(a)
            | Op::RowSqSum(a)
            | Op::SliceCols(a, _, _)
            | Op::Slice(a, _, _)
            | Op::Reshape(a)
            | Op::Broadcast(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::GaussianReparam { mean, scale, .. } => vec![*mean, *scale],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct NodeData {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records primitives for one loss evaluation. Build a fresh tape per
/// evaluation; tapes are not meant to be reused across parameter updates.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<NodeData>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf: gradients are reported for it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(NodeData {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Appends a derived node; it requires gradients iff any parent does.
    fn derived(&self, value: Tensor, op: Op) -> Var<'_> {
        let rg = op.parents().iter().any(|&p| self.requires(p));
        self.push(value, op, rg)
    }

    /// Concatenates flattened nodes into one vector.
    pub fn concat(&self, parts: &[Var<'_>]) -> Result<Var<'_>> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat of zero nodes".into()));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value_of(p.id)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let value = Tensor::concat(&refs);
        Ok(self.derived(value, Op::Concat(parts.iter().map(|p| p.id).collect())))
    }

    /// Stacks equally shaped nodes as the rows of a matrix.
    pub fn stack_rows(&self, rows: &[Var<'_>]) -> Result<Var<'_>> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidInput("stack of zero nodes".into()))?;
        let width = first.value().len();
        for r in rows {
            if r.value().len() != width {
                return Err(Error::Shape(format!(
                    "stack_rows: row {:?} vs {:?}",
                    r.shape(),
                    first.shape()
                )));
            }
        }
        self.concat(rows)?.reshape(vec![rows.len(), width])
    }

    /// Applies a caller-defined primitive.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        op: Rc<dyn CustomOp>,
    ) -> Var<'t> {
        self.derived(
            value,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                op,
            },
        )
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!(
        "{op}: operands of shape {:?} and {:?}",
        a.shape(),
        b.shape()
    ))
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn soft_threshold_value(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(name, &a, &b));
        }
        let value = a.zip_map(&b, f)?;
        Ok(self.tape.derived(value, op))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.derived(value, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "subtract", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "elementwise-multiply",
            |a, b| a * b,
            Op::Mul(self.id, other.id),
        )
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(|v| v * s, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.unary(|v| v + c, Op::AddConst(self.id))
    }

    /// Multiplies every entry by a one-element node.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if !sv.is_scalar() {
            return Err(Error::Shape(format!(
                "mul_scalar: scale must have one element, got {:?}",
                sv.shape()
            )));
        }
        let k = sv.item();
        Ok(self.unary(|v| v * k, Op::MulScalar(self.id, s.id)))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(|v| 1.0 / v, Op::Recip(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(self.id, slope),
        )
    }

    /// Elementwise `sign(x)·max(|x| − λ, 0)` with a one-element threshold node.
    pub fn soft_threshold(self, lambda: Var<'t>) -> Result<Var<'t>> {
        let lv = lambda.value();
        if !lv.is_scalar() {
            return Err(Error::Shape(format!(
                "soft_threshold: threshold must have one element, got {:?}",
                lv.shape()
            )));
        }
        let l = lv.item();
        Ok(self.unary(
            move |v| soft_threshold_value(v, l),
            Op::SoftThreshold(self.id, lambda.id),
        ))
    }

    fn reduce(self, f: impl Fn(&Tensor) -> f64, op: Op) -> Var<'t> {
        let v = f(&self.value());
        self.tape.derived(Tensor::scalar(v), op)
    }

    pub fn l1_sum(self) -> Var<'t> {
        self.reduce(Tensor::l1, Op::L1Sum(self.id))
    }

    pub fn sq_l2_sum(self) -> Var<'t> {
        self.reduce(Tensor::norm_sq, Op::SqL2Sum(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        self.reduce(Tensor::sum, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        self.reduce(Tensor::mean, Op::Mean(self.id))
    }

    /// Matrix `self` (m×n) times vector `v` (n).
    pub fn matvec(self, v: Var<'t>) -> Result<Var<'t>> {
        let (m, x) = (self.value(), v.value());
        let value = m.matvec(&x).map_err(|_| shape_err("matvec", &m, &x))?;
        Ok(self.tape.derived(value, Op::MatVec(self.id, v.id)))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let value = a.matmul(&b).map_err(|_| shape_err("matmul", &a, &b))?;
        Ok(self.tape.derived(value, Op::MatMul(self.id, other.id)))
    }

    /// Outer product of two vectors.
    pub fn outer(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (m, n) = (a.len(), b.len());
        let mut data = Vec::with_capacity(m * n);
        for &ai in a.data() {
            data.extend(b.data().iter().map(|bj| ai * bj));
        }
        self.tape
            .derived(Tensor::new(vec![m, n], data), Op::Outer(self.id, other.id))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        Ok(self.tape.derived(value, Op::Transpose(self.id)))
    }

    /// Adds vector `bias` (n) to every row of matrix `self` (m×n).
    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (m, b) = (self.value(), bias.value());
        let (r, c) = m.dims2()?;
        if b.len() != c {
            return Err(shape_err("add_row_bias", &m, &b));
        }
        let mut data = m.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b.data()[j];
            }
        }
        Ok(self.tape.derived(
            Tensor::new(vec![r, c], data),
            Op::AddRowBias(self.id, bias.id),
        ))
    }

    /// Repeats vector `self` (n) as `rows` rows of a matrix.
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        let v = self.value();
        let n = v.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        self.tape
            .derived(Tensor::new(vec![rows, n], data), Op::BroadcastRows(self.id))
    }

    /// Column sums of a matrix.
    pub fn col_sum(self) -> Result<Var<'t>> {
        let m = self.value();
        let (r, c) = m.dims2()?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += m.data()[i * c + j];
            }
        }
        Ok(self.tape.derived(Tensor::vector(out), Op::ColSum(self.id)))
    }

    /// Squared Euclidean norm of every row of a matrix.
    pub fn row_sq_sum(self) -> Result<Var<'t>> {
        let m = self.value();
        let (r, c) = m.dims2()?;
        let out = (0..r)
            .map(|i| m.data()[i * c..(i + 1) * c].iter().map(|v| v * v).sum())
            .collect();
        Ok(self
            .tape
            .derived(Tensor::vector(out), Op::RowSqSum(self.id)))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let m = self.value();
        let (r, c) = m.dims2()?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols: columns {start}..{} of matrix {:?}",
                start + len,
                m.shape()
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&m.data()[i * c + start..i * c + start + len]);
        }
        Ok(self.tape.derived(
            Tensor::new(vec![r, len], data),
            Op::SliceCols(self.id, start, len),
        ))
    }

    /// Flat entries `start..start+len` as a vector.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start + len > v.len() {
            return Err(Error::Shape(format!(
                "slice: range {start}..{} of tensor {:?}",
                start + len,
                v.shape()
            )));
        }
        let data = v.data()[start..start + len].to_vec();
        Ok(self
            .tape
            .derived(Tensor::vector(data), Op::Slice(self.id, start, len)))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.derived(value, Op::Reshape(self.id)))
    }

    /// Fills a tensor of `shape` with the value of a one-element node.
    pub fn broadcast(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if !v.is_scalar() {
            return Err(Error::Shape(format!("broadcast from {:?}", v.shape())));
        }
        Ok(self
            .tape
            .derived(Tensor::full(shape, v.item()), Op::Broadcast(self.id)))
    }

    /// `mean + scale ⊙ noise` where `noise` is a fixed draw (no gradient).
    /// `scale` may be a one-element node or match the mean's shape.
    pub fn gaussian_reparam(self, scale: Var<'t>, noise: Tensor) -> Result<Var<'t>> {
        let (m, s) = (self.value(), scale.value());
        if m.shape() != noise.shape() {
            return Err(shape_err("gaussian_reparam", &m, &noise));
        }
        let value = if s.is_scalar() {
            let k = s.item();
            m.zip_map(&noise, |a, z| a + k * z)?
        } else if s.shape() == m.shape() {
            let scaled = s.mul(&noise)?;
            m.add(&scaled)?
        } else {
            return Err(shape_err("gaussian_reparam", &m, &s));
        };
        Ok(self.tape.derived(
            value,
            Op::GaussianReparam {
                mean: self.id,
                scale: scale.id,
                noise: Rc::new(noise),
            },
        ))
    }
}

#[cfg(test)]
mod tests;
