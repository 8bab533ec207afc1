//! Minimal layer toolkit on top of candle tensors.

pub mod gradcheck;
pub mod kernels;
mod layers;
mod params;
pub mod resample;

pub use layers::{
    softplus, BatchNorm2d, Conv2d, EncoderLayer, FeedForward, LayerNorm, Linear,
    MultiHeadAttention,
};
pub use kernels::normalize_last;
pub use params::{Init, ParamStore, Scope};
