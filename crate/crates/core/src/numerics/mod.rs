//! Minimal tensor engine with reverse-mode differentiation and the layer
//! operations the embedding network needs.

mod gru;
pub mod ops;
mod tensor;

pub use gru::{gru_forward, GruParams};
pub use ops::{
    add, add_scalar, batchnorm1d, conv1d, conv1d_output_len, cosine_rows, cosine_similarity,
    leaky_relu, linear, maxpool1d, mean_stack, mul, narrow_rows, reshape, scale, soft_cross_entropy,
    softmax, softmax_cce, sub, sum, transpose_last2, Mode, RunningStats, BN_EPS, BN_MOMENTUM,
};
pub use tensor::{GraphNode, Tensor};
