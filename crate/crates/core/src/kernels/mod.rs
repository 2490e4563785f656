//! Forward and backward numerical kernels. All functions are pure and
//! single-threaded.

pub mod activation;
pub mod conv;
pub mod norm;

pub use activation::{
    nearest_upsample, nearest_upsample_backward, prelu, prelu_backward, relu, relu_backward,
    softmax_over_sources, softmax_stacked, softmax_stacked_backward,
};
pub use conv::{
    conv1d, conv1d_backward, conv_transpose1d, conv_transpose1d_backward, depthwise_conv1d,
    ConvGrads, ConvSpec,
};
pub use norm::{
    channelwise_layer_norm, global_layer_norm, layer_norm, layer_norm_backward, NormCache,
    NormKind, NORM_EPS,
};
