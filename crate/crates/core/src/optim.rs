//! First-order optimizers and the finiteness-gated parameter update.

use crate::error::Result;
use crate::numerics::{DType, Scalar};
use crate::tensor::Tensor;
use crate::tree::{Leaf, Tree};

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Sgd,
    Adam {
        m: Tree,
        v: Tree,
        b1: f32,
        b2: f32,
        eps: f32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub method: Method,
    pub lr: f32,
    /// Number of updates applied so far (skipped steps don't count).
    pub step_count: u64,
}

fn zeros_like(params: &Tree) -> Tree {
    params.map_leaves(|leaf| match leaf {
        Leaf::Tensor(t) if t.dtype().is_float() => {
            Leaf::Tensor(Tensor::zeros(t.shape().to_vec(), DType::F32))
        }
        _ => Leaf::Empty,
    })
}

impl OptimizerState {
    pub fn sgd(_params: &Tree, lr: f32) -> Self {
        Self {
            method: Method::Sgd,
            lr,
            step_count: 0,
        }
    }

    /// Adam with the usual defaults (0.9, 0.999, 1e-8).
    pub fn adam(params: &Tree, lr: f32) -> Self {
        Self::adam_with(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn adam_with(params: &Tree, lr: f32, b1: f32, b2: f32, eps: f32) -> Self {
        Self {
            method: Method::Adam {
                m: zeros_like(params),
                v: zeros_like(params),
                b1,
                b2,
                eps,
            },
            lr,
            step_count: 0,
        }
    }

    /// Updates to add to the parameters, in `F32`, and the advanced state.
    /// Non-float and empty gradient leaves produce empty updates.
    pub fn compute_updates(&self, grads: &Tree) -> Result<(Tree, OptimizerState)> {
        let step = self.step_count + 1;
        match &self.method {
            Method::Sgd => {
                let lr = Scalar::weak(-self.lr);
                let updates = grads.try_map_leaves(|_, leaf| {
                    Ok(match leaf {
                        Leaf::Tensor(g) if g.dtype().is_float() => {
                            Leaf::Tensor(g.cast(DType::F32)?.mul_scalar(lr)?)
                        }
                        _ => Leaf::Empty,
                    })
                })?;
                let next = OptimizerState {
                    step_count: step,
                    ..self.clone()
                };
                Ok((updates, next))
            }
            Method::Adam { m, v, b1, b2, eps } => {
                let (b1, b2, eps) = (*b1, *b2, *eps);
                let bc1 = 1.0 - b1.powi(step as i32);
                let bc2 = 1.0 - b2.powi(step as i32);
                let lr = self.lr;
                let moments = grads.zip_map(m, |_, g, m| adam_moment(g, m, b1))?;
                let seconds = grads.zip_map(v, |_, g, v| adam_second(g, v, b2))?;
                let updates = moments.zip_map(&seconds, |_, m, v| {
                    Ok(match (m, v) {
                        (Leaf::Tensor(m), Leaf::Tensor(v)) => {
                            let m_hat = m.div_scalar(Scalar::weak(bc1))?;
                            let v_hat = v.div_scalar(Scalar::weak(bc2))?;
                            let denom = v_hat.sqrt()?.add_scalar(Scalar::weak(eps))?;
                            Leaf::Tensor(m_hat.div(&denom)?.mul_scalar(Scalar::weak(-lr))?)
                        }
                        _ => Leaf::Empty,
                    })
                })?;
                let next = OptimizerState {
                    method: Method::Adam {
                        m: moments,
                        v: seconds,
                        b1,
                        b2,
                        eps,
                    },
                    lr,
                    step_count: step,
                };
                Ok((updates, next))
            }
        }
    }
}

fn adam_moment(g: &Leaf, m: &Leaf, b1: f32) -> Result<Leaf> {
    Ok(match (g, m) {
        (Leaf::Tensor(g), Leaf::Tensor(m)) if g.dtype().is_float() => {
            let g = g.cast(DType::F32)?;
            Leaf::Tensor(
                m.mul_scalar(Scalar::weak(b1))?
                    .add(&g.mul_scalar(Scalar::weak(1.0 - b1))?)?,
            )
        }
        (_, m) => m.clone(),
    })
}

fn adam_second(g: &Leaf, v: &Leaf, b2: f32) -> Result<Leaf> {
    Ok(match (g, v) {
        (Leaf::Tensor(g), Leaf::Tensor(v)) if g.dtype().is_float() => {
            let g = g.cast(DType::F32)?;
            Leaf::Tensor(
                v.mul_scalar(Scalar::weak(b2))?
                    .add(&g.mul(&g)?.mul_scalar(Scalar::weak(1.0 - b2))?)?,
            )
        }
        (_, v) => v.clone(),
    })
}

/// Applies the optimizer step only when `grads_finite` holds; otherwise the
/// model and optimizer state come back unchanged. Updated parameters keep
/// their own dtype.
pub fn optimizer_update(
    model: &Tree,
    state: &OptimizerState,
    grads: &Tree,
    grads_finite: bool,
) -> Result<(Tree, OptimizerState)> {
    if !grads_finite {
        return Ok((model.clone(), state.clone()));
    }
    let (updates, next) = state.compute_updates(grads)?;
    let model = model.zip_map(&updates, |_, p, u| {
        Ok(match (p, u) {
            (Leaf::Tensor(p), Leaf::Tensor(u)) if p.dtype().is_float() => {
                Leaf::Tensor(p.cast(DType::F32)?.add(u)?.cast(p.dtype())?)
            }
            (p, _) => p.clone(),
        })
    })?;
    Ok((model, next))
}
