//! Vector-Jacobian products for each primitive.
//!
//! `ct` is the cotangent of the node output and has the output's dtype. Every
//! rule computes in that dtype with the same stepwise rounding as the forward
//! kernels; the caller casts each contribution to the input's own dtype.

use crate::error::Result;
use crate::numerics::{quantize, DType, Scalar};
use crate::tensor::kernels::{self, axis_split, BinaryOp, Op, ReduceOp, UnaryOp};
use crate::tensor::{numel, Tensor};

use super::TapeNode;

pub(super) fn vjp(op: &Op, node: &TapeNode, ct: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let needs = |i: usize| node.inputs[i].node.is_some();
    let input = |i: usize| &node.inputs[i].value;
    let out = &node.output;

    let grads = match op {
        Op::Binary(b) => {
            let (a, bv) = (input(0), input(1));
            let (da, db) = match b {
                BinaryOp::Add => (
                    needs(0).then(|| Ok(ct.clone())),
                    needs(1).then(|| Ok(ct.clone())),
                ),
                BinaryOp::Sub => (needs(0).then(|| Ok(ct.clone())), needs(1).then(|| ct.neg())),
                BinaryOp::Mul => (needs(0).then(|| ct.mul(bv)), needs(1).then(|| ct.mul(a))),
                BinaryOp::Div => (
                    needs(0).then(|| ct.div(bv)),
                    // d(a/b)/db = -(a/b)/b
                    needs(1).then(|| ct.mul(out)?.div(bv)?.neg()),
                ),
            };
            vec![
                da.transpose()?
                    .map(|g| kernels::sum_to_shape(&g, a.shape())),
                db.transpose()?
                    .map(|g| kernels::sum_to_shape(&g, bv.shape())),
            ]
        }
        Op::Unary(u) => {
            let a = input(0);
            let g = match u {
                UnaryOp::Neg => ct.neg()?,
                UnaryOp::Exp => ct.mul(out)?,
                UnaryOp::Relu => pointwise(ct, a, |x| if x > 0.0 { 1.0 } else { 0.0 }),
                UnaryOp::Gelu => pointwise(ct, a, kernels::gelu_derivative),
                UnaryOp::Sqrt => ct.div(&out.mul_scalar(Scalar::weak(2.0))?)?,
            };
            vec![Some(g)]
        }
        Op::WithScalar {
            op,
            scalar,
            scalar_lhs,
        } => {
            let g = match (op, scalar_lhs) {
                (BinaryOp::Add, _) | (BinaryOp::Sub, false) => ct.clone(),
                (BinaryOp::Sub, true) => ct.neg()?,
                (BinaryOp::Mul, _) => ct.mul_scalar(*scalar)?,
                (BinaryOp::Div, false) => ct.div_scalar(*scalar)?,
                // d(s/a)/da = -(s/a)/a
                (BinaryOp::Div, true) => ct.mul(out)?.div(input(0))?.neg()?,
            };
            vec![Some(g)]
        }
        Op::MatMul => {
            let (a, b) = (input(0), input(1));
            let da = needs(0).then(|| ct.matmul(&b.transpose()?)).transpose()?;
            let db = if needs(1) {
                Some(if b.rank() == 2 && a.rank() > 2 {
                    // shared weight: fold batch axes into rows
                    let k = a.shape()[a.rank() - 1];
                    let n = ct.shape()[ct.rank() - 1];
                    let rows = a.numel() / k;
                    a.reshape(vec![rows, k])?
                        .transpose()?
                        .matmul(&ct.reshape(vec![rows, n])?)?
                } else {
                    a.transpose()?.matmul(ct)?
                })
            } else {
                None
            };
            vec![da, db]
        }
        Op::Reduce { op, axis } => vec![Some(reduce_vjp(*op, *axis, input(0), out, ct)?)],
        Op::Softmax { axis } => vec![Some(softmax_vjp(out, ct, *axis))],
        Op::LayerNorm => {
            let (dx, dg, db) = layernorm_vjp(input(0), input(1), input(2), ct)?;
            vec![Some(dx), needs(1).then_some(dg), needs(2).then_some(db)]
        }
        Op::CrossEntropy => vec![Some(cross_entropy_vjp(input(0), input(1), ct)?), None],
        Op::Reshape(_) => vec![Some(ct.reshape(input(0).shape().to_vec())?)],
        Op::Permute(perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![Some(ct.permute(inverse)?)]
        }
        // the caller casts back to the input dtype
        Op::Cast(_) => vec![Some(ct.clone())],
    };
    Ok(grads)
}

/// `ct * q(deriv(a))`, elementwise in the cotangent dtype.
fn pointwise(ct: &Tensor, a: &Tensor, deriv: impl Fn(f32) -> f32) -> Tensor {
    let dtype = ct.dtype();
    let data = ct
        .data()
        .iter()
        .zip(a.data())
        .map(|(&c, &x)| quantize(c * quantize(deriv(x), dtype), dtype))
        .collect();
    Tensor::from_parts(ct.shape().to_vec(), dtype, data)
}

fn reduce_vjp(
    op: ReduceOp,
    axis: Option<usize>,
    a: &Tensor,
    out: &Tensor,
    ct: &Tensor,
) -> Result<Tensor> {
    // cotangent with the reduced axis kept as extent 1
    let kept: Vec<usize> = match axis {
        None => vec![1; a.rank()],
        Some(ax) => {
            let mut s = a.shape().to_vec();
            s[ax] = 1;
            s
        }
    };
    let ct_kept = ct.detached().with_shape(kept.clone());
    match op {
        ReduceOp::Sum => Ok(kernels::broadcast_to(&ct_kept, a.shape())),
        ReduceOp::Mean => {
            let n = match axis {
                None => a.numel(),
                Some(ax) => a.shape()[ax],
            };
            let scaled = ct_kept.div_scalar(Scalar::weak(n as f32))?;
            Ok(kernels::broadcast_to(&scaled, a.shape()))
        }
        ReduceOp::Max => {
            // route the cotangent to the first maximal element of each lane
            let out_kept = out.detached().with_shape(kept);
            let dtype = ct.dtype();
            let (outer, len, inner) = match axis {
                None => (1, a.numel(), 1),
                Some(ax) => axis_split(a.shape(), ax),
            };
            let mut g = vec![0.0f32; a.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let lane = o * inner + i;
                    let target = out_kept.data()[lane];
                    let base = o * len * inner + i;
                    if let Some(j) = (0..len).find(|&j| {
                        let x = a.data()[base + j * inner];
                        x == target || (x.is_nan() && target.is_nan())
                    }) {
                        g[base + j * inner] = ct_kept.data()[lane];
                    }
                }
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), dtype, g))
        }
    }
}

fn softmax_vjp(y: &Tensor, ct: &Tensor, axis: usize) -> Tensor {
    let dtype = ct.dtype();
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, cd) = (y.data(), ct.data());
    let mut g = vec![0.0f32; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0f32;
            for j in 0..len {
                let k = base + j * inner;
                dot = quantize(dot + quantize(cd[k] * yd[k], dtype), dtype);
            }
            for j in 0..len {
                let k = base + j * inner;
                g[k] = quantize(yd[k] * quantize(cd[k] - dot, dtype), dtype);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dtype, g)
}

fn layernorm_vjp(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    ct: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dtype = kernels::layernorm_dtype(x, gain, bias)?;
    let d = *x.shape().last().expect("validated rank");
    let q = |v: f32| quantize(v, dtype);
    let xl = kernels::cast(x, dtype)?;
    let g = kernels::cast(gain, dtype)?;
    let mut dx = Vec::with_capacity(x.numel());
    let mut dgain = vec![0.0f32; d];
    let mut dbias = vec![0.0f32; d];
    let inv_d = 1.0 / d as f32;
    for (row, ct_row) in xl.data().chunks(d).zip(ct.data().chunks(d)) {
        let stats = kernels::layernorm_row(row, dtype);
        let dxhat: Vec<f32> = ct_row
            .iter()
            .zip(g.data())
            .map(|(&c, &gj)| q(c * gj))
            .collect();
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_xhat = 0.0f32;
        for j in 0..d {
            sum_dxhat = q(sum_dxhat + dxhat[j]);
            sum_dxhat_xhat = q(sum_dxhat_xhat + q(dxhat[j] * stats.xhat[j]));
            dgain[j] = q(dgain[j] + q(ct_row[j] * stats.xhat[j]));
            dbias[j] = q(dbias[j] + ct_row[j]);
        }
        let mean_dxhat = q(sum_dxhat * inv_d);
        let mean_dxhat_xhat = q(sum_dxhat_xhat * inv_d);
        for (&g, &xh) in dxhat.iter().zip(&stats.xhat) {
            let centered = q(q(g - mean_dxhat) - q(xh * mean_dxhat_xhat));
            dx.push(q(centered / stats.denom));
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dtype, dx),
        Tensor::from_parts(vec![d], dtype, dgain),
        Tensor::from_parts(vec![d], dtype, dbias),
    ))
}

fn cross_entropy_vjp(logits: &Tensor, labels: &Tensor, ct: &Tensor) -> Result<Tensor> {
    let (rows, classes) = kernels::check_labels(logits, labels)?;
    let dtype: DType = ct.dtype();
    let upstream = quantize(ct.data()[0] / rows as f32, dtype);
    let mut g = Vec::with_capacity(numel(logits.shape()));
    for (row, &label) in logits.data().chunks(classes).zip(labels.data()) {
        let (exps, sum, _) = kernels::row_exp(row, dtype);
        for (c, e) in exps.into_iter().enumerate() {
            let p = quantize(e / sum, dtype);
            let diff = if c == label as usize {
                quantize(p - 1.0, dtype)
            } else {
                p
            };
            g.push(quantize(diff * upstream, dtype));
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), dtype, g))
}
