//! Dense row-major tensors with a nominal dtype.
//!
//! The payload is always `f32`; the dtype says which values it may hold.
//! Operations return new tensors (payloads are shared via `Arc`, so clones
//! are cheap). When a gradient computation is active on the current thread,
//! operations touching tracked tensors are recorded on its tape.

pub(crate) mod kernels;

use std::fmt;
use std::sync::Arc;

use crate::autodiff::{self, Trace};
use crate::error::{Error, Result};
use crate::numerics::{is_representable, quantize, DType, Scalar};

pub use kernels::{BinaryOp, Op, ReduceOp, UnaryOp};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Arc<[f32]>,
    pub(crate) trace: Option<Trace>,
}

/// Elementwise operation codes accepted by [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Relu,
    Gelu,
    Sqrt,
}

/// Second operand of a binary elementwise op.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(Scalar),
}

impl Tensor {
    /// Builds a tensor, rounding float payloads into `dtype`. Integer payloads
    /// must already hold integers in `i32` range.
    pub fn new(shape: impl Into<Vec<usize>>, dtype: DType, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::PayloadLength {
                shape,
                len: data.len(),
            });
        }
        let data = if dtype.is_float() {
            data.into_iter().map(|x| quantize(x, dtype)).collect()
        } else {
            if let Some(&bad) = data.iter().find(|&&x| !is_representable(x, dtype)) {
                return Err(Error::InvalidElement { value: bad, dtype });
            }
            data
        };
        Ok(Self::from_parts(shape, dtype, data))
    }

    pub fn from_f32(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, DType::F32, data)
    }

    pub fn from_i32(shape: impl Into<Vec<usize>>, data: &[i32]) -> Result<Self> {
        Self::new(shape, DType::I32, data.iter().map(|&x| x as f32).collect())
    }

    /// A rank-0 tensor.
    pub fn scalar(value: f32, dtype: DType) -> Self {
        let v = if dtype.is_float() {
            quantize(value, dtype)
        } else {
            value.trunc()
        };
        Self::from_parts(vec![], dtype, vec![v])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>, dtype: DType) -> Self {
        Self::full(shape, 0.0, dtype)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32, dtype: DType) -> Self {
        let shape = shape.into();
        let v = if dtype.is_float() {
            quantize(value, dtype)
        } else {
            value.trunc()
        };
        let n = numel(&shape);
        Self::from_parts(shape, dtype, vec![v; n])
    }

    pub(crate) fn from_parts(shape: Vec<usize>, dtype: DType, data: Vec<f32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            dtype,
            data: data.into(),
            trace: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Analytic memory footprint at the nominal precision.
    pub fn bytes(&self) -> usize {
        numel(&self.shape) * self.dtype.byte_width()
    }

    /// True when no element is infinite or NaN. Integer tensors are always finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Same shape, dtype and payload bits.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype == other.dtype
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// A copy that is not attached to any gradient tape.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data: Arc::clone(&self.data),
            trace: None,
        }
    }

    pub(crate) fn with_shape(&self, shape: Vec<usize>) -> Tensor {
        Tensor {
            shape,
            dtype: self.dtype,
            data: Arc::clone(&self.data),
            trace: None,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        autodiff::apply(Op::Binary(BinaryOp::Add), &[self, other])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        autodiff::apply(Op::Binary(BinaryOp::Sub), &[self, other])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        autodiff::apply(Op::Binary(BinaryOp::Mul), &[self, other])
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        autodiff::apply(Op::Binary(BinaryOp::Div), &[self, other])
    }

    fn scalar_op(&self, op: BinaryOp, scalar: Scalar, scalar_lhs: bool) -> Result<Tensor> {
        autodiff::apply(
            Op::WithScalar {
                op,
                scalar,
                scalar_lhs,
            },
            &[self],
        )
    }

    pub fn add_scalar(&self, s: Scalar) -> Result<Tensor> {
        self.scalar_op(BinaryOp::Add, s, false)
    }

    pub fn sub_scalar(&self, s: Scalar) -> Result<Tensor> {
        self.scalar_op(BinaryOp::Sub, s, false)
    }

    /// `s - self`
    pub fn rsub_scalar(&self, s: Scalar) -> Result<Tensor> {
        self.scalar_op(BinaryOp::Sub, s, true)
    }

    pub fn mul_scalar(&self, s: Scalar) -> Result<Tensor> {
        self.scalar_op(BinaryOp::Mul, s, false)
    }

    pub fn div_scalar(&self, s: Scalar) -> Result<Tensor> {
        self.scalar_op(BinaryOp::Div, s, false)
    }

    /// `s / self`
    pub fn rdiv_scalar(&self, s: Scalar) -> Result<Tensor> {
        self.scalar_op(BinaryOp::Div, s, true)
    }

    pub fn neg(&self) -> Result<Tensor> {
        autodiff::apply(Op::Unary(UnaryOp::Neg), &[self])
    }

    pub fn exp(&self) -> Result<Tensor> {
        autodiff::apply(Op::Unary(UnaryOp::Exp), &[self])
    }

    pub fn relu(&self) -> Result<Tensor> {
        autodiff::apply(Op::Unary(UnaryOp::Relu), &[self])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        autodiff::apply(Op::Unary(UnaryOp::Gelu), &[self])
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        autodiff::apply(Op::Unary(UnaryOp::Sqrt), &[self])
    }

    /// Matrix product over the last two axes. Leading axes are batch axes and
    /// must match, unless `other` is a plain matrix shared by every batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        autodiff::apply(Op::MatMul, &[self, other])
    }

    pub fn reduce(&self, op: ReduceOp, axis: Option<usize>) -> Result<Tensor> {
        autodiff::apply(Op::Reduce { op, axis }, &[self])
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(ReduceOp::Sum, axis)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(ReduceOp::Mean, axis)
    }

    pub fn max(&self, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(ReduceOp::Max, axis)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        autodiff::apply(Op::Softmax { axis }, &[self])
    }

    /// Normalises over the last axis: `(x - mean) / sqrt(var + 1e-5) * gain + bias`.
    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        autodiff::apply(Op::LayerNorm, &[self, gain, bias])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(self)` along
    /// the class axis. `self` is `[batch, classes]`, `labels` is `i32[batch]`.
    pub fn cross_entropy(&self, labels: &Tensor) -> Result<Tensor> {
        autodiff::apply(Op::CrossEntropy, &[self, labels])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        autodiff::apply(Op::Reshape(shape.into()), &[self])
    }

    pub fn permute(&self, perm: impl Into<Vec<usize>>) -> Result<Tensor> {
        autodiff::apply(Op::Permute(perm.into()), &[self])
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(perm)
    }

    /// Converts to a float dtype, rounding each element. Casting to the
    /// current dtype returns the tensor unchanged.
    pub fn cast(&self, dtype: DType) -> Result<Tensor> {
        if dtype == self.dtype && dtype.is_float() {
            return Ok(self.clone());
        }
        autodiff::apply(Op::Cast(dtype), &[self])
    }
}

/// Analytic footprint of `t` in bytes.
pub fn bytes_of(t: &Tensor) -> usize {
    t.bytes()
}

/// Applies an elementwise op. Unary codes ignore `rhs`; binary codes require it.
pub fn elementwise(op: ElementwiseOp, lhs: &Tensor, rhs: Option<Operand<'_>>) -> Result<Tensor> {
    let binary = match op {
        ElementwiseOp::Add => BinaryOp::Add,
        ElementwiseOp::Sub => BinaryOp::Sub,
        ElementwiseOp::Mul => BinaryOp::Mul,
        ElementwiseOp::Div => BinaryOp::Div,
        ElementwiseOp::Neg => return lhs.neg(),
        ElementwiseOp::Exp => return lhs.exp(),
        ElementwiseOp::Relu => return lhs.relu(),
        ElementwiseOp::Gelu => return lhs.gelu(),
        ElementwiseOp::Sqrt => return lhs.sqrt(),
    };
    match rhs {
        Some(Operand::Tensor(t)) => autodiff::apply(Op::Binary(binary), &[lhs, t]),
        Some(Operand::Scalar(s)) => lhs.scalar_op(binary, s, false),
        None => Err(Error::Message(format!("{op:?} needs a second operand"))),
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.dtype == other.dtype && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?} {:?}", self.dtype, self.shape, &self.data[..])
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?} [", self.dtype, self.shape)?;
        for (i, x) in self.data.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{x}")?;
        }
        f.write_str("]")
    }
}
