//! Small CPU tensor engine: NCHW tensors, reverse-mode autodiff, layers and
//! Adam.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{Activation, Gradients, Graph, Var};
pub use layers::{AttentionBlock, Conv2d, GroupNorm, Linear, ResBlock};
pub use params::{AdamConfig, Init, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
