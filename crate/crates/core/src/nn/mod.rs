//! Minimal reverse-mode engine for the two trainable networks: an f32 NCHW
//! tensor, a tape, convolution / batch-norm layers and Adam.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Grads, Graph, NodeId};
pub use layers::{BatchNorm2d, Conv2d, ConvBlock, Mode};
pub use optim::Adam;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
