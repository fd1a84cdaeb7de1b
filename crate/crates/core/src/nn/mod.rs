//! Minimal dense-tensor core: kernels, reverse-mode autodiff and the
//! optimizer.

pub mod autograd;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use autograd::{Graph, ParamId, ParamStore, Var};
pub use ops::{
    affine, cross_entropy, layer_norm, log_softmax, multi_head_attention, relative_bucket, softmax_rows,
    RelativeTables, LAYER_NORM_EPS,
};
pub use optim::Adam;
pub use tensor::{matmul, Scalar, Tensor};
