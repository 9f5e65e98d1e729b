//! Minimal neural-network building blocks on top of `candle-core` tensors.

mod layers;
mod norm;
mod ops;
mod rnn;
mod store;

pub use layers::{BatchNorm, Conv2d, Linear, Mode, TemporalConv};
pub use ops::{conv2d, relu, sigmoid, temporal_conv, ConvGeom};
pub use rnn::{Cell, Recurrent};
pub use store::{Init, ParamStore, Path};
