//! Differentiable network operations: forward kernels and their gradients.

mod activation;
mod conv;
mod loss;
mod norm;
mod pool;
mod upsample;

pub use activation::{elu, elu_backward, rectifier, rectifier_backward};
pub use conv::{
    conv2d, conv2d_backward, conv_out_dim, tconv, tconv_backward, tconv_out_dim, transpose01,
};
pub use loss::{
    argmax_map, masked_cross_entropy, masked_cross_entropy_backward, softmax_channels,
    softmax_channels_backward, LOG_CLAMP,
};
pub use norm::{
    batch_norm_backward_infer, batch_norm_backward_train, batch_norm_infer, batch_norm_train,
    BnStats,
};
pub use pool::{maxpool2, maxpool2_backward};
pub use upsample::{upsample, upsample_backward, UpsampleMode};
