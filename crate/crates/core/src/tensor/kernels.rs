//! Forward kernels. Every kernel computes in binary32 and rounds each partial
//! result through the output dtype, so accumulations overflow exactly where a
//! native half-precision accumulator would.

use crate::error::{Error, Result};
use crate::numerics::{promote, promote_with_scalar, quantize, DType, Scalar};
use crate::tensor::{numel, Tensor};

pub(crate) const LAYERNORM_EPS: f32 = 1e-5;

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    pub(crate) fn eval(self, x: f32, y: f32) -> f32 {
        match self {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Relu,
    Gelu,
    Sqrt,
}

impl UnaryOp {
    #[inline]
    pub(crate) fn eval(self, x: f32) -> f32 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Relu => {
                if x > 0.0 || x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            UnaryOp::Gelu => gelu(x),
            UnaryOp::Sqrt => x.sqrt(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Relu => "relu",
            UnaryOp::Gelu => "gelu",
            UnaryOp::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// A recorded primitive. Carries everything needed to re-run the forward
/// computation from the input values alone.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Binary(BinaryOp),
    Unary(UnaryOp),
    WithScalar {
        op: BinaryOp,
        scalar: Scalar,
        scalar_lhs: bool,
    },
    MatMul,
    Reduce {
        op: ReduceOp,
        axis: Option<usize>,
    },
    Softmax {
        axis: usize,
    },
    LayerNorm,
    CrossEntropy,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Cast(DType),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Binary(b) => b.name(),
            Op::Unary(u) => u.name(),
            Op::WithScalar { op, .. } => op.name(),
            Op::MatMul => "matmul",
            Op::Reduce { op, .. } => match op {
                ReduceOp::Sum => "sum",
                ReduceOp::Mean => "mean",
                ReduceOp::Max => "max",
            },
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm => "layernorm",
            Op::CrossEntropy => "cross_entropy",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Cast(_) => "cast",
        }
    }
}

pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Binary(b) => binary(*b, inputs[0], inputs[1]),
        Op::Unary(u) => unary(*u, inputs[0]),
        Op::WithScalar {
            op,
            scalar,
            scalar_lhs,
        } => with_scalar(*op, inputs[0], scalar, *scalar_lhs),
        Op::MatMul => matmul(inputs[0], inputs[1]),
        Op::Reduce { op, axis } => reduce(*op, inputs[0], *axis),
        Op::Softmax { axis } => softmax(inputs[0], *axis),
        Op::LayerNorm => layernorm(inputs[0], inputs[1], inputs[2]),
        Op::CrossEntropy => cross_entropy(inputs[0], inputs[1]),
        Op::Reshape(shape) => reshape(inputs[0], shape),
        Op::Permute(perm) => permute(inputs[0], perm),
        Op::Cast(dtype) => cast(inputs[0], *dtype),
    }
}

pub(crate) fn gelu(x: f32) -> f32 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_derivative(x: f32) -> f32 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn require_float(op: &'static str, dtype: DType) -> Result<()> {
    if dtype.is_float() {
        Ok(())
    } else {
        Err(Error::NotFloat { op, dtype })
    }
}

/// Converts a value held in `from` into `to` the way a dtype conversion would.
#[inline]
fn lift(x: f32, from: DType, to: DType) -> f32 {
    if from == to || (from.is_float() && to == DType::F32) {
        x
    } else {
        quantize(x, to)
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every position of `out` (row-major), the flat index into a tensor of
/// shape `src` broadcast to `out`.
pub(crate) fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    if src == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let offset = rank - src.len();
    // strides of src aligned to out, zero on broadcast axes
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        idx.push(pos);
        for d in (0..rank).rev() {
            counter[d] += 1;
            pos += strides[d];
            if counter[d] < out[d] {
                break;
            }
            pos -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

pub(crate) fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dtype = promote(a.dtype(), b.dtype());
    require_float(op.name(), dtype)?;
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let (ad, bd) = (a.data(), b.data());
    let (at, bt) = (a.dtype(), b.dtype());
    let data: Vec<f32> = if a.shape() == b.shape() {
        ad.iter()
            .zip(bd)
            .map(|(&x, &y)| quantize(op.eval(lift(x, at, dtype), lift(y, bt, dtype)), dtype))
            .collect()
    } else {
        let ai = broadcast_index(a.shape(), &shape);
        let bi = broadcast_index(b.shape(), &shape);
        ai.iter()
            .zip(&bi)
            .map(|(&i, &j)| {
                quantize(
                    op.eval(lift(ad[i], at, dtype), lift(bd[j], bt, dtype)),
                    dtype,
                )
            })
            .collect()
    };
    Ok(Tensor::from_parts(shape, dtype, data))
}

pub(crate) fn unary(op: UnaryOp, a: &Tensor) -> Result<Tensor> {
    let dtype = a.dtype();
    require_float(op.name(), dtype)?;
    let data = a
        .data()
        .iter()
        .map(|&x| quantize(op.eval(x), dtype))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), dtype, data))
}

pub(crate) fn with_scalar(
    op: BinaryOp,
    a: &Tensor,
    s: &Scalar,
    scalar_lhs: bool,
) -> Result<Tensor> {
    let dtype = promote_with_scalar(a.dtype(), s);
    require_float(op.name(), dtype)?;
    // a weak literal takes on the tensor's dtype before the operation
    let sv = quantize(s.value, dtype);
    let at = a.dtype();
    let data = a
        .data()
        .iter()
        .map(|&x| {
            let x = lift(x, at, dtype);
            let r = if scalar_lhs {
                op.eval(sv, x)
            } else {
                op.eval(x, sv)
            };
            quantize(r, dtype)
        })
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), dtype, data))
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dtype = promote(a.dtype(), b.dtype());
    require_float("matmul", dtype)?;
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    let (ar, br) = (a.rank(), b.rank());
    if ar < 2 || br < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (k2, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let batch_shape = &a.shape()[..ar - 2];
    let shared_rhs = br == 2;
    if !shared_rhs && &b.shape()[..br - 2] != batch_shape {
        return Err(mismatch());
    }
    let batches = numel(batch_shape);
    let (ad, bd) = (a.data(), b.data());
    let (at, bt) = (a.dtype(), b.dtype());
    let mut out = vec![0.0f32; batches * m * n];
    for bi in 0..batches {
        let a_off = bi * m * k;
        let b_off = if shared_rhs { 0 } else { bi * k * n };
        let o_off = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    let x = lift(ad[a_off + i * k + p], at, dtype);
                    let y = lift(bd[b_off + p * n + j], bt, dtype);
                    acc = quantize(acc + quantize(x * y, dtype), dtype);
                }
                out[o_off + i * n + j] = acc;
            }
        }
    }
    let mut shape = batch_shape.to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, dtype, out))
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis < t.rank() {
        Ok(())
    } else {
        Err(Error::InvalidAxis {
            op,
            axis,
            rank: t.rank(),
        })
    }
}

fn reduce_lane(
    op: ReduceOp,
    lane: impl Iterator<Item = f32>,
    len: usize,
    dtype: DType,
) -> Result<f32> {
    match op {
        ReduceOp::Sum | ReduceOp::Mean => {
            let mut acc = 0.0f32;
            for x in lane {
                acc = quantize(acc + x, dtype);
            }
            if op == ReduceOp::Mean {
                if len == 0 {
                    return Err(Error::EmptyReduction { op: "mean" });
                }
                acc = quantize(acc / len as f32, dtype);
            }
            Ok(acc)
        }
        ReduceOp::Max => {
            if len == 0 {
                return Err(Error::EmptyReduction { op: "max" });
            }
            let mut best = f32::NEG_INFINITY;
            for x in lane {
                if x.is_nan() {
                    return Ok(x);
                }
                if x > best {
                    best = x;
                }
            }
            Ok(best)
        }
    }
}

pub(crate) fn reduce(op: ReduceOp, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    let dtype = a.dtype();
    require_float("reduce", dtype)?;
    let data = a.data();
    match axis {
        None => {
            let v = reduce_lane(op, data.iter().copied(), data.len(), dtype)?;
            Ok(Tensor::from_parts(vec![], dtype, vec![v]))
        }
        Some(axis) => {
            check_axis("reduce", a, axis)?;
            let (outer, len, inner) = axis_split(a.shape(), axis);
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let lane = (0..len).map(|j| data[base + j * inner]);
                    out.push(reduce_lane(op, lane, len, dtype)?);
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            Ok(Tensor::from_parts(shape, dtype, out))
        }
    }
}

pub(crate) fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    let dtype = a.dtype();
    require_float("softmax", dtype)?;
    check_axis("softmax", a, axis)?;
    let (outer, len, inner) = axis_split(a.shape(), axis);
    let data = a.data();
    let mut out = vec![0.0f32; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let at = |j: usize| base + j * inner;
            let max = (0..len)
                .map(|j| data[at(j)])
                .fold(
                    f32::NEG_INFINITY,
                    |m, x| if x > m || x.is_nan() { x } else { m },
                );
            let mut sum = 0.0f32;
            for j in 0..len {
                let e = quantize(quantize(data[at(j)] - max, dtype).exp(), dtype);
                out[at(j)] = e;
                sum = quantize(sum + e, dtype);
            }
            for j in 0..len {
                out[at(j)] = quantize(out[at(j)] / sum, dtype);
            }
        }
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), dtype, out))
}

/// Per-row statistics of layer normalisation, shared with the backward rule.
pub(crate) struct RowNorm {
    /// normalised values, quantized
    pub xhat: Vec<f32>,
    /// sqrt(var + eps), quantized
    pub denom: f32,
}

pub(crate) fn layernorm_row(row: &[f32], dtype: DType) -> RowNorm {
    let d = row.len() as f32;
    let mut sum = 0.0f32;
    for &x in row {
        sum = quantize(sum + x, dtype);
    }
    let mean = quantize(sum / d, dtype);
    let centered: Vec<f32> = row.iter().map(|&x| quantize(x - mean, dtype)).collect();
    let mut sq = 0.0f32;
    for &c in &centered {
        sq = quantize(sq + quantize(c * c, dtype), dtype);
    }
    let var = quantize(sq / d, dtype);
    let eps = quantize(LAYERNORM_EPS, dtype);
    let denom = quantize(quantize(var + eps, dtype).sqrt(), dtype);
    let xhat = centered
        .iter()
        .map(|&c| quantize(c / denom, dtype))
        .collect();
    RowNorm { xhat, denom }
}

pub(crate) fn layernorm_dtype(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<DType> {
    let dtype = promote(promote(x.dtype(), gain.dtype()), bias.dtype());
    require_float("layernorm", dtype)?;
    let d = *x
        .shape()
        .last()
        .ok_or(Error::EmptyReduction { op: "layernorm" })?;
    if d == 0 {
        return Err(Error::EmptyReduction { op: "layernorm" });
    }
    for p in [gain, bias] {
        if p.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    Ok(dtype)
}

pub(crate) fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let dtype = layernorm_dtype(x, gain, bias)?;
    let d = *x.shape().last().unwrap();
    let lifted = cast(x, dtype)?;
    let (g, b) = (cast(gain, dtype)?, cast(bias, dtype)?);
    let mut out = Vec::with_capacity(x.numel());
    for row in lifted.data().chunks(d) {
        let stats = layernorm_row(row, dtype);
        for (j, &xh) in stats.xhat.iter().enumerate() {
            out.push(quantize(
                quantize(xh * g.data()[j], dtype) + b.data()[j],
                dtype,
            ));
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dtype, out))
}

pub(crate) fn check_labels(logits: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    require_float("cross_entropy", logits.dtype())?;
    if labels.dtype() != DType::I32 {
        return Err(Error::Message(format!(
            "cross_entropy labels must be i32, got {}",
            labels.dtype()
        )));
    }
    if logits.rank() != 2 || labels.shape() != [logits.shape()[0]] {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let (rows, classes) = (logits.shape()[0], logits.shape()[1]);
    if rows == 0 || classes == 0 {
        return Err(Error::EmptyReduction {
            op: "cross_entropy",
        });
    }
    for &l in labels.data() {
        if l < 0.0 || l as usize >= classes {
            return Err(Error::LabelOutOfRange {
                label: l as i64,
                classes,
            });
        }
    }
    Ok((rows, classes))
}

/// Stabilised softmax of one row: (exp(x - max) quantized, their quantized
/// sum, max).
pub(crate) fn row_exp(row: &[f32], dtype: DType) -> (Vec<f32>, f32, f32) {
    let max = row.iter().fold(
        f32::NEG_INFINITY,
        |m, &x| if x > m || x.is_nan() { x } else { m },
    );
    let mut sum = 0.0f32;
    let exps = row
        .iter()
        .map(|&x| {
            let e = quantize(quantize(x - max, dtype).exp(), dtype);
            sum = quantize(sum + e, dtype);
            e
        })
        .collect();
    (exps, sum, max)
}

pub(crate) fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (rows, classes) = check_labels(logits, labels)?;
    let dtype = logits.dtype();
    let mut total = 0.0f32;
    for (row, &label) in logits.data().chunks(classes).zip(labels.data()) {
        let (_, sum, max) = row_exp(row, dtype);
        let lse = quantize(max + quantize(sum.ln(), dtype), dtype);
        let nll = quantize(lse - row[label as usize], dtype);
        total = quantize(total + nll, dtype);
    }
    let loss = quantize(total / rows as f32, dtype);
    Ok(Tensor::from_parts(vec![], dtype, vec![loss]))
}

pub(crate) fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel(shape) != a.numel() {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            lhs: a.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(a.with_shape(shape.to_vec()))
}

pub(crate) fn permute(a: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = a.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::ShapeMismatch {
            op: "permute",
            lhs: a.shape().to_vec(),
            rhs: perm.to_vec(),
        });
    }
    let shape: Vec<usize> = perm.iter().map(|&p| a.shape()[p]).collect();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = acc;
        acc *= a.shape()[d];
    }
    // stride in the source for each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let data = a.data();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        out.push(data[pos]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            pos += strides[d];
            if counter[d] < shape[d] {
                break;
            }
            pos -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Ok(Tensor::from_parts(shape, a.dtype(), out))
}

pub(crate) fn cast(a: &Tensor, dtype: DType) -> Result<Tensor> {
    require_float("cast", dtype)?;
    if a.dtype() == dtype {
        return Ok(a.detached());
    }
    let data = a.data().iter().map(|&x| quantize(x, dtype)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), dtype, data))
}

/// Sums `t` down to `shape` (the inverse of broadcasting), accumulating
/// stepwise in `t`'s dtype.
pub(crate) fn sum_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.detached();
    }
    let dtype = t.dtype();
    let idx = broadcast_index(shape, t.shape());
    let mut out = vec![0.0f32; numel(shape)];
    for (&x, &i) in t.data().iter().zip(&idx) {
        out[i] = quantize(out[i] + x, dtype);
    }
    Tensor::from_parts(shape.to_vec(), dtype, out)
}

pub(crate) fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    let idx = broadcast_index(t.shape(), shape);
    let data = t.data();
    let out = idx.iter().map(|&i| data[i]).collect();
    Tensor::from_parts(shape.to_vec(), t.dtype(), out)
}
