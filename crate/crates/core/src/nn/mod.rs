//! Minimal layer toolkit on top of candle: seeded parameters, an im2col
//! convolution, and the normalization/activation helpers shared by every
//! network in the crate.

mod conv;
mod layers;
mod params;

pub use conv::{conv2d, Conv2d};
pub use layers::{
    crop, reflect_pad_to, reflect_pad_to_multiple, sigmoid, split_channels, ConvNormAct,
    InstanceNorm, Linear, ResBlock,
};
pub use params::{Init, Params};
