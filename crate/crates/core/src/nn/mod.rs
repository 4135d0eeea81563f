//! Minimal tensor and reverse-mode differentiation engine used by every
//! trainable network in the crate.

mod gemm;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gemm::gemm;
pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
