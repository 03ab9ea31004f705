//! Dense tensors with reverse-mode differentiation.

mod array;
mod graph;
mod kernels;
pub mod pointwise;

pub use array::Array;
pub use graph::{
    Activation, ClassWeights, FocalTarget, Gradients, Graph, Padding, Precision, Tensor,
};
