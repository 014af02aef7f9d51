//! Forward (and matching backward) numeric kernels.

mod activation;
mod conv;
mod norm;

pub use activation::{relu, relu_backward, softmax_channels, softmax_cross_entropy, softmax_cross_entropy_backward};
pub use conv::{
    conv3d, conv3d_backward_bias, conv3d_backward_input, conv3d_backward_weight, conv3d_direct, deconv3d,
    deconv3d_backward_input, deconv3d_backward_weight,
};
pub use norm::{
    batchnorm_infer, batchnorm_infer_backward, batchnorm_train, batchnorm_train_backward, BatchNormSaved, Mode,
    RunningStats, BN_EPSILON, BN_MOMENTUM,
};
