//! Mixed-precision transforms: casting trees and functions, dynamic loss
//! scaling, and the loss-scaled gradient transform.
//!
//! A training step in mixed precision looks like
//!
//! ```
//! use mixprec::{filter_value_and_grad, optimizer_update, LossScaling, OptimizerState, Tensor, Tree};
//!
//! # fn main() -> mixprec::Result<()> {
//! let model = Tree::map([("w", Tree::tensor(Tensor::from_f32(vec![2], vec![0.5, -1.0])?))]);
//! let batch = Tree::map([("x", Tree::tensor(Tensor::from_f32(vec![2], vec![1.0, 2.0])?))]);
//! let loss = |m: &Tree, b: &Tree| m.tensor_at("w")?.mul(b.tensor_at("x")?)?.sum(None);
//!
//! let scaling = LossScaling::default();
//! let mut opt = OptimizerState::sgd(&model, 0.1);
//!
//! let step = filter_value_and_grad(loss, &scaling, true).call(&model, &batch)?;
//! let (model, opt) = optimizer_update(&model, &opt, &step.grads, step.grads_finite)?;
//! # let _ = (model, opt, step.scaling);
//! # Ok(())
//! # }
//! ```
//!
//! The caller keeps the master weights in `f32`; the transform re-casts them
//! to half precision on every call.

use std::sync::atomic::{AtomicU8, Ordering};

use crate::autodiff::{self, LossOutput};
use crate::error::{Error, Result};
use crate::numerics::{quantize, DType, Scalar};
use crate::tensor::Tensor;
use crate::tree::{Leaf, Tree};

static HALF_PRECISION: AtomicU8 = AtomicU8::new(0);

/// The half-precision format used by [`cast_to_half_precision`] and by
/// gradient transforms that don't override it. Defaults to `F16`.
pub fn half_precision() -> DType {
    match HALF_PRECISION.load(Ordering::Relaxed) {
        1 => DType::BF16,
        _ => DType::F16,
    }
}

/// Selects the process-wide half-precision format (`F16` or `BF16`).
pub fn set_half_precision(dtype: DType) -> Result<()> {
    let code = match dtype {
        DType::F16 => 0,
        DType::BF16 => 1,
        other => {
            return Err(Error::InvalidConfig(format!(
                "half precision must be f16 or bf16, got {other}"
            )))
        }
    };
    HALF_PRECISION.store(code, Ordering::Relaxed);
    Ok(())
}

fn require_float(dtype: DType, what: &'static str) -> Result<()> {
    if dtype.is_float() {
        Ok(())
    } else {
        Err(Error::NotFloat { op: what, dtype })
    }
}

fn cast_leaf(leaf: &Leaf, dtype: DType) -> Result<Leaf> {
    Ok(match leaf {
        Leaf::Tensor(t) if t.dtype().is_float() => Leaf::Tensor(t.cast(dtype)?),
        Leaf::Scalar(s) if !s.weak && s.dtype.is_float() => Leaf::Scalar(Scalar {
            value: quantize(s.value, dtype),
            dtype,
            weak: false,
        }),
        other => other.clone(),
    })
}

/// Casts every float leaf of `t` to `dtype`. Integer tensors, weak scalars
/// and opaque leaves pass through unchanged.
pub fn cast_tree(t: &Tree, dtype: DType) -> Result<Tree> {
    require_float(dtype, "cast_tree")?;
    t.try_map_leaves(|_, leaf| cast_leaf(leaf, dtype))
}

pub fn cast_to_float16(t: &Tree) -> Tree {
    cast_tree(t, DType::F16).expect("float target")
}

pub fn cast_to_bfloat16(t: &Tree) -> Tree {
    cast_tree(t, DType::BF16).expect("float target")
}

pub fn cast_to_float32(t: &Tree) -> Tree {
    cast_tree(t, DType::F32).expect("float target")
}

pub fn cast_to_half_precision(t: &Tree) -> Tree {
    cast_tree(t, half_precision()).expect("float target")
}

/// Wraps `f` so that its inputs are cast to `dtype` and, if given, its
/// outputs to `return_dtype`.
pub fn cast_function<F>(
    f: F,
    dtype: DType,
    return_dtype: Option<DType>,
) -> Result<impl Fn(&Tree) -> Result<Tree>>
where
    F: Fn(&Tree) -> Result<Tree>,
{
    require_float(dtype, "cast_function")?;
    if let Some(r) = return_dtype {
        require_float(r, "cast_function")?;
    }
    Ok(move |x: &Tree| {
        let out = f(&cast_tree(x, dtype)?)?;
        match return_dtype {
            Some(r) => cast_tree(&out, r),
            None => Ok(out),
        }
    })
}

/// Wraps `f` so that it runs in `F32` and its outputs come back as
/// `return_dtype`. Use it for overflow-prone pieces (sums, means, softmax,
/// layer normalisation) inside a half-precision computation.
pub fn force_full_precision<F>(f: F, return_dtype: DType) -> Result<impl Fn(&Tree) -> Result<Tree>>
where
    F: Fn(&Tree) -> Result<Tree>,
{
    cast_function(f, DType::F32, Some(return_dtype))
}

/// [`force_full_precision`] for the common single-tensor case.
pub fn full_precision_tensor<F>(f: F, x: &Tensor, return_dtype: DType) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    require_float(return_dtype, "force_full_precision")?;
    f(&x.cast(DType::F32)?)?.cast(return_dtype)
}

/// Dynamic loss-scaling state.
///
/// The scale backs off after every step with non-finite gradients and grows
/// after `growth_interval` consecutive finite steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossScaling {
    loss_scale: f32,
    growth_interval: u32,
    growth_factor: f32,
    backoff_factor: f32,
    steps_since_growth: u32,
    min_scale: f32,
}

impl Default for LossScaling {
    fn default() -> Self {
        Self {
            loss_scale: 32768.0,
            growth_interval: 2000,
            growth_factor: 2.0,
            backoff_factor: 0.5,
            steps_since_growth: 0,
            min_scale: 1.0,
        }
    }
}

impl LossScaling {
    pub fn new(
        loss_scale: f32,
        growth_interval: u32,
        growth_factor: f32,
        backoff_factor: f32,
        min_scale: f32,
    ) -> Result<Self> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(min_scale.is_finite() && min_scale > 0.0) {
            return bad("min_scale must be positive and finite");
        }
        if !(loss_scale.is_finite() && loss_scale >= min_scale) {
            return bad("loss scale must be finite and at least min_scale");
        }
        if growth_interval == 0 {
            return bad("growth_interval must be positive");
        }
        if !(growth_factor.is_finite() && growth_factor > 1.0) {
            return bad("growth_factor must be greater than 1");
        }
        if !(backoff_factor > 0.0 && backoff_factor < 1.0) {
            return bad("backoff_factor must lie in (0, 1)");
        }
        Ok(Self {
            loss_scale,
            growth_interval,
            growth_factor,
            backoff_factor,
            steps_since_growth: 0,
            min_scale,
        })
    }

    /// Defaults with a different initial scale.
    pub fn with_scale(loss_scale: f32) -> Result<Self> {
        let d = Self::default();
        Self::new(
            loss_scale,
            d.growth_interval,
            d.growth_factor,
            d.backoff_factor,
            d.min_scale,
        )
    }

    pub fn loss_scale(&self) -> f32 {
        self.loss_scale
    }

    pub fn growth_interval(&self) -> u32 {
        self.growth_interval
    }

    pub fn growth_factor(&self) -> f32 {
        self.growth_factor
    }

    pub fn backoff_factor(&self) -> f32 {
        self.backoff_factor
    }

    pub fn steps_since_growth(&self) -> u32 {
        self.steps_since_growth
    }

    pub fn min_scale(&self) -> f32 {
        self.min_scale
    }

    /// Multiplies every float leaf by the scale, as a weak constant (leaf
    /// dtypes are kept).
    pub fn scale(&self, t: &Tree) -> Tree {
        let factor = Scalar::weak(self.loss_scale);
        t.map_leaves(|leaf| match leaf {
            Leaf::Tensor(x) if x.dtype().is_float() => {
                Leaf::Tensor(x.mul_scalar(factor).expect("float operand"))
            }
            Leaf::Scalar(s) if !s.weak && s.dtype.is_float() => Leaf::Scalar(Scalar {
                value: quantize(s.value * quantize(self.loss_scale, s.dtype), s.dtype),
                ..*s
            }),
            other => other.clone(),
        })
    }

    /// Casts every float leaf to `F32`, then divides it by the scale.
    pub fn unscale(&self, t: &Tree) -> Tree {
        let divisor = Scalar::weak(self.loss_scale);
        t.map_leaves(|leaf| match leaf {
            Leaf::Tensor(x) if x.dtype().is_float() => Leaf::Tensor(
                x.cast(DType::F32)
                    .and_then(|x| x.div_scalar(divisor))
                    .expect("float operand"),
            ),
            Leaf::Scalar(s) if !s.weak && s.dtype.is_float() => Leaf::Scalar(Scalar {
                value: s.value / self.loss_scale,
                dtype: DType::F32,
                weak: false,
            }),
            other => other.clone(),
        })
    }

    /// Next state given whether the latest gradients were finite.
    #[must_use]
    pub fn adjust(&self, grads_finite: bool) -> LossScaling {
        let mut next = self.clone();
        if !grads_finite {
            next.loss_scale = (self.loss_scale * self.backoff_factor).max(self.min_scale);
            next.steps_since_growth = 0;
        } else if self.steps_since_growth + 1 >= self.growth_interval {
            let grown = self.loss_scale * self.growth_factor;
            if grown.is_finite() {
                next.loss_scale = grown;
            }
            next.steps_since_growth = 0;
        } else {
            next.steps_since_growth = self.steps_since_growth + 1;
        }
        next
    }
}

/// Output of a loss-scaled gradient computation.
#[derive(Debug, Clone)]
pub struct GradResult {
    /// Scaling state after adjusting for this step.
    pub scaling: LossScaling,
    /// Whether every gradient entry is finite; gate the optimizer on it.
    pub grads_finite: bool,
    /// Unscaled `F32` gradients with the structure of the parameters.
    pub grads: Tree,
    pub aux: Option<Tree>,
    /// Unscaled loss in `F32` (only from [`filter_value_and_grad`]).
    pub value: Option<Tensor>,
    /// Analytic bytes of the recorded forward intermediates.
    pub activation_bytes: usize,
}

/// Gradient transform built by [`filter_value_and_grad`] or [`filter_grad`].
pub struct GradTransform<F> {
    f: F,
    scaling: LossScaling,
    use_mixed_precision: bool,
    half: DType,
    with_value: bool,
}

/// Loss-scaled value-and-gradient of `f(params, args)`.
///
/// With mixed precision on, each call casts params and args to half
/// precision, evaluates `f`, scales the loss, differentiates, unscales the
/// gradients to `F32`, checks them for finiteness and adjusts the scaling.
/// With it off, the computation runs in `F32` and the scaling is returned
/// unchanged.
pub fn filter_value_and_grad<F>(
    f: F,
    scaling: &LossScaling,
    use_mixed_precision: bool,
) -> GradTransform<F> {
    GradTransform {
        f,
        scaling: scaling.clone(),
        use_mixed_precision,
        half: half_precision(),
        with_value: true,
    }
}

/// Like [`filter_value_and_grad`] without the loss value.
pub fn filter_grad<F>(f: F, scaling: &LossScaling, use_mixed_precision: bool) -> GradTransform<F> {
    GradTransform {
        with_value: false,
        ..filter_value_and_grad(f, scaling, use_mixed_precision)
    }
}

impl<F> GradTransform<F> {
    /// Overrides the half-precision format picked up at construction.
    pub fn half_dtype(mut self, dtype: DType) -> Result<Self> {
        if !matches!(dtype, DType::F16 | DType::BF16) {
            return Err(Error::InvalidConfig(format!(
                "half precision must be f16 or bf16, got {dtype}"
            )));
        }
        self.half = dtype;
        Ok(self)
    }

    pub fn call<L>(&self, params: &Tree, args: &Tree) -> Result<GradResult>
    where
        F: Fn(&Tree, &Tree) -> Result<L>,
        L: LossOutput,
    {
        if !self.use_mixed_precision {
            let params = cast_tree(params, DType::F32)?;
            let args = cast_tree(args, DType::F32)?;
            let out = autodiff::value_and_grad(&self.f, &params, &args)?;
            let grads = cast_tree(&out.grads, DType::F32)?;
            return Ok(GradResult {
                scaling: self.scaling.clone(),
                grads_finite: grads.all_finite(),
                grads,
                aux: out.aux,
                value: self
                    .with_value
                    .then(|| out.value.cast(DType::F32))
                    .transpose()?,
                activation_bytes: out.activation_bytes,
            });
        }

        let params = cast_tree(params, self.half)?;
        let args = cast_tree(args, self.half)?;
        let scale = Scalar::weak(self.scaling.loss_scale());
        let mut unscaled_loss = None;
        let mut had_aux = false;
        let out = autodiff::value_and_grad(
            |p: &Tree, a: &Tree| {
                let (loss, aux) = (self.f)(p, a)?.into_parts();
                unscaled_loss = Some(loss.detached());
                had_aux = aux.is_some();
                let scaled = loss.mul_scalar(scale)?;
                Ok((scaled, aux.unwrap_or_else(Tree::empty_map)))
            },
            &params,
            &args,
        )?;
        let grads = self.scaling.unscale(&out.grads);
        let grads_finite = grads.all_finite();
        let value = match (self.with_value, unscaled_loss) {
            (true, Some(loss)) => Some(loss.cast(DType::F32)?),
            _ => None,
        };
        let aux = out.aux.filter(|_| had_aux);
        Ok(GradResult {
            scaling: self.scaling.adjust(grads_finite),
            grads_finite,
            grads,
            aux,
            value,
            activation_bytes: out.activation_bytes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32s(shape: Vec<usize>, v: Vec<f32>) -> Tensor {
        Tensor::from_f32(shape, v).unwrap()
    }

    fn leaf(t: &Tree, path: &str) -> Tensor {
        t.tensor_at(path).unwrap().clone()
    }

    #[test]
    fn cast_tree_skips_integers() {
        let t = Tree::map([
            ("w", Tree::tensor(f32s(vec![2], vec![1.0, 2f32.powi(-25)]))),
            ("k", Tree::tensor(Tensor::from_i32(vec![1], &[7]).unwrap())),
            ("s", Tree::scalar(Scalar::weak(0.1))),
            ("name", Tree::opaque("relu")),
        ]);
        let out = cast_tree(&t, DType::F16).unwrap();
        assert_eq!(leaf(&out, "w").dtype(), DType::F16);
        assert_eq!(leaf(&out, "w").to_vec(), vec![1.0, 0.0]);
        assert_eq!(leaf(&out, "k").dtype(), DType::I32);
        assert_eq!(out.get("s"), t.get("s"));
        assert_eq!(out.get("name"), t.get("name"));
        assert!(cast_tree(&out, DType::F16).unwrap().bitwise_eq(&out));
        assert!(cast_tree(&t, DType::I32).is_err());
        assert_eq!(cast_to_float32(&Tree::empty_map()), Tree::empty_map());
    }

    #[test]
    fn cast_function_demotes_before_the_sum() {
        let sum = |x: &Tree| Ok(Tree::tensor(x.tensor_at("x")?.sum(None)?));
        let g = cast_function(sum, DType::F16, Some(DType::F32)).unwrap();
        let x = Tree::map([("x", Tree::tensor(f32s(vec![2], vec![60000.0, 60000.0])))]);
        let out = leaf(&g(&x).unwrap(), "");
        assert_eq!(out.dtype(), DType::F32);
        assert_eq!(out.item().unwrap(), f32::INFINITY);

        let keep = cast_function(|x: &Tree| Ok(x.clone()), DType::BF16, None).unwrap();
        assert_eq!(leaf(&keep(&x).unwrap(), "x").dtype(), DType::BF16);
    }

    #[test]
    fn full_precision_mean_avoids_overflow() {
        let x = f32s(vec![2], vec![60000.0, 60000.0])
            .cast(DType::F16)
            .unwrap();
        assert_eq!(x.mean(None).unwrap().item().unwrap(), f32::INFINITY);
        let mean = |t: &Tree| Ok(Tree::tensor(t.tensor_at("")?.mean(None)?));
        let g = force_full_precision(mean, DType::F16).unwrap();
        let out = leaf(&g(&Tree::tensor(x.clone())).unwrap(), "");
        assert_eq!((out.dtype(), out.item().unwrap()), (DType::F16, 60000.0));

        let soft = full_precision_tensor(|t| t.softmax(0), &x, DType::F16).unwrap();
        assert_eq!(soft.dtype(), DType::F16);
        assert_eq!(soft.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn scale_and_unscale() {
        let s = LossScaling::with_scale(1024.0).unwrap();
        let t = Tree::tensor(f32s(vec![1], vec![0.5]).cast(DType::F16).unwrap());
        let scaled = s.scale(&t);
        assert_eq!(leaf(&scaled, "").dtype(), DType::F16);
        assert_eq!(leaf(&scaled, "").to_vec(), vec![512.0]);
        let back = leaf(&s.unscale(&scaled), "");
        assert_eq!((back.dtype(), back.to_vec()), (DType::F32, vec![0.5]));

        let big = LossScaling::with_scale(65536.0).unwrap();
        let two = Tree::tensor(f32s(vec![1], vec![2.0]).cast(DType::F16).unwrap());
        assert_eq!(leaf(&big.scale(&two), "").to_vec(), vec![f32::INFINITY]);
        let inf = Tree::tensor(f32s(vec![1], vec![f32::INFINITY]).cast(DType::F16).unwrap());
        assert!(!s.unscale(&inf).all_finite());
    }

    #[test]
    fn adjust_transitions() {
        let s = LossScaling::with_scale(1024.0).unwrap();
        let down = s.adjust(false);
        assert_eq!((down.loss_scale(), down.steps_since_growth()), (512.0, 0));

        let up = s.adjust(true);
        assert_eq!((up.loss_scale(), up.steps_since_growth()), (1024.0, 1));

        let mut near = LossScaling::new(1024.0, 3, 2.0, 0.5, 1.0).unwrap();
        near = near.adjust(true).adjust(true);
        assert_eq!(near.steps_since_growth(), 2);
        let grown = near.adjust(true);
        assert_eq!(
            (grown.loss_scale(), grown.steps_since_growth()),
            (2048.0, 0)
        );

        let floor = LossScaling::new(1.0, 10, 2.0, 0.5, 1.0)
            .unwrap()
            .adjust(false);
        assert_eq!(floor.loss_scale(), 1.0);

        let top = LossScaling::new(2f32.powi(127), 1, 2.0, 0.5, 1.0)
            .unwrap()
            .adjust(true);
        assert_eq!(
            (top.loss_scale(), top.steps_since_growth()),
            (2f32.powi(127), 0)
        );
    }

    #[test]
    fn invalid_scaling_configs() {
        assert!(LossScaling::new(0.5, 10, 2.0, 0.5, 1.0).is_err());
        assert!(LossScaling::new(8.0, 0, 2.0, 0.5, 1.0).is_err());
        assert!(LossScaling::new(8.0, 10, 1.0, 0.5, 1.0).is_err());
        assert!(LossScaling::new(8.0, 10, 2.0, 1.0, 1.0).is_err());
        assert!(LossScaling::new(f32::INFINITY, 10, 2.0, 0.5, 1.0).is_err());
    }

    fn square(p: &Tree, _: &Tree) -> Result<Tensor> {
        let w = p.tensor_at("w")?;
        w.mul(w)?.sum(None)
    }

    #[test]
    fn mixed_value_and_grad() {
        let params = Tree::map([("w", Tree::tensor(f32s(vec![1], vec![3.0])))]);
        let s = LossScaling::with_scale(1024.0).unwrap();
        let out = filter_value_and_grad(square, &s, true)
            .half_dtype(DType::F16)
            .unwrap()
            .call(&params, &Tree::empty_map())
            .unwrap();
        assert!(out.grads_finite);
        assert_eq!(out.value.unwrap().to_vec(), vec![9.0]);
        let g = leaf(&out.grads, "w");
        assert_eq!((g.dtype(), g.to_vec()), (DType::F32, vec![6.0]));
        assert_eq!(out.scaling.steps_since_growth(), 1);
        assert!(out.aux.is_none());
        assert!(out.activation_bytes > 0);
    }

    #[test]
    fn overflowing_loss_backs_off() {
        let f = |p: &Tree, _: &Tree| {
            p.tensor_at("w")?
                .mul_scalar(Scalar::weak(60000.0))?
                .sum(None)
        };
        let params = Tree::map([("w", Tree::tensor(f32s(vec![1], vec![2.0])))]);
        let s = LossScaling::with_scale(65536.0).unwrap();
        let out = filter_grad(f, &s, true)
            .half_dtype(DType::F16)
            .unwrap()
            .call(&params, &Tree::empty_map())
            .unwrap();
        assert!(!out.grads_finite);
        assert!(!out.grads.all_finite());
        assert_eq!(leaf(&out.grads, "w").dtype(), DType::F32);
        assert_eq!(out.scaling.loss_scale(), 32768.0);
        assert!(out.value.is_none());
    }

    #[test]
    fn full_precision_path_is_plain() {
        let params = Tree::map([("w", Tree::tensor(f32s(vec![2], vec![0.1, -0.7])))]);
        let s = LossScaling::default();
        let out = filter_value_and_grad(square, &s, false)
            .call(&params, &Tree::empty_map())
            .unwrap();
        let plain = autodiff::value_and_grad(square, &params, &Tree::empty_map()).unwrap();
        assert!(out.grads.bitwise_eq(&plain.grads));
        assert_eq!(out.scaling, s);
        assert!(out.grads_finite);
    }

    #[test]
    fn aux_passes_through_in_half() {
        let f = |p: &Tree, _: &Tree| {
            let w = p.tensor_at("w")?;
            Ok((w.sum(None)?, Tree::tensor(w.clone())))
        };
        let params = Tree::map([("w", Tree::tensor(f32s(vec![1], vec![0.1])))]);
        let out = filter_value_and_grad(f, &LossScaling::default(), true)
            .half_dtype(DType::BF16)
            .unwrap()
            .call(&params, &Tree::empty_map())
            .unwrap();
        assert_eq!(leaf(out.aux.as_ref().unwrap(), "").dtype(), DType::BF16);
    }

    #[test]
    fn half_precision_switch() {
        assert!(set_half_precision(DType::F32).is_err());
        assert!(filter_grad(square, &LossScaling::default(), true)
            .half_dtype(DType::I32)
            .is_err());
    }
}
