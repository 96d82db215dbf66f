//! Minimal CPU tensor engine for NCHW convolutional networks.
//!
//! Every layer exposes an explicit forward/backward pair. Forward passes
//! return whatever the backward pass needs as an owned cache, so layers
//! never mutate themselves and a network can be evaluated concurrently
//! from shared references. Gradients accumulate into a [`ParamStore`].

mod conv;
mod norm;
mod ops;
mod params;
mod scalar;
mod tensor;

pub use conv::Conv2d;
pub use norm::{GroupNorm, GroupNormCache};
pub use ops::{
    concat_channels, leaky_relu, leaky_relu_backward, pixel_shuffle, pixel_unshuffle,
    split_channels, LEAKY_SLOPE,
};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
