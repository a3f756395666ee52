//! Minimal convolutional network toolkit with hand-written backward passes.
//!
//! Everything is f32 on NCHW tensors. Layers cache what they need during
//! forward; backward consumes the cache, accumulates parameter gradients and
//! returns the input gradient.

pub mod layers;
pub mod param;

pub use layers::{
    check_finite, col2im, im2col, pad_spatial, unpad_spatial_grad, AvgPool2, Conv2d,
    ConvTranspose2d, InstanceNorm2d, Layer, LeakyRelu, PadMode, Relu, ResidualUnit, Sequential,
    Tanh, Tensor,
};
pub use param::{Adam, Param};
