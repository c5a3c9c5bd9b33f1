//! Differentiable layer primitives. Each forward has a matching `*_backward`
//! returning gradients shaped like the corresponding primals.

mod activation;
mod conv;
mod loss;
mod norm;
mod pool;

pub(crate) use activation::sigmoid_scalar;
pub use activation::{
    elementwise_mul, elementwise_mul_backward, relu, relu_backward, sigmoid, sigmoid_backward,
    tanh, tanh_backward,
};
pub use conv::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, ConvGrads, Padding,
};
pub use loss::{softmax_ce_backward, softmax_ce_loss, softmax_channels, CrossEntropy};
pub use norm::{
    batchnorm, batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads,
    BatchNormParams, Mode, DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
pub use pool::{maxpool2x2, maxpool2x2_backward, PoolOutput};
