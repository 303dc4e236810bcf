//! Tensors, reverse-mode autodiff and the layer primitives used by the model.

mod autodiff;
pub mod conv;
pub mod norm;
pub mod ops;
mod param;
mod scalar;
mod tensor;

pub use autodiff::{backward, BackwardFn, Gradients, Var};
pub use conv::{conv2d, conv_out_dim, conv_transpose2d};
pub use norm::{batch_norm2d, layer_norm, BatchStats, NormMode, RunningStats};
pub use ops::{
    add, add_bcast, add_const, bmm, concat_channels, gather, gelu, linear, mean, mul, permute,
    reshape, scale, sigmoid, softmax_lastdim, sub, sum,
};
pub use param::{Init, ParamRegistry, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub(crate) use tensor::dims4;
