//! Simulated mixed-precision training: low-precision tensors, parameter
//! trees, reverse-mode differentiation, loss scaling and optimizers.
//!
//! Tensors store `f32` payloads and round every result to their nominal
//! dtype, so `f16` and `bf16` arithmetic is reproduced exactly without
//! hardware support.

pub mod autodiff;
mod error;
pub mod numerics;
pub mod optim;
pub mod precision;
pub mod tensor;
pub mod tree;

pub use autodiff::{value_and_grad, LossOutput, ValueAndGrad};
pub use error::{Error, Result};
pub use numerics::{promote, promote_with_scalar, quantize, DType, Scalar};
pub use optim::{optimizer_update, OptimizerState};
pub use precision::{
    cast_function, cast_to_bfloat16, cast_to_float16, cast_to_float32, cast_to_half_precision,
    cast_tree, filter_grad, filter_value_and_grad, force_full_precision, full_precision_tensor,
    half_precision, set_half_precision, GradResult, LossScaling,
};
pub use tensor::Tensor;
pub use tree::{Leaf, Tree, TreeStructure};
