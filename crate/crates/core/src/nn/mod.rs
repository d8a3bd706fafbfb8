//! Minimal sequential network engine with manual backpropagation.

mod layers;
mod network;

pub use layers::{AdaptiveAvgPool, BatchNorm2d, Buffer, Conv2d, Layer, Linear, MaxPool2d, Param, Relu, Residual};
pub use network::{hash_state, Network, Segment, StateDict, StateEntry};
