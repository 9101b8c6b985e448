//! Reverse-mode automatic differentiation over dense tensors, sized for
//! single-machine training of small convolutional networks.

pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use param::{GroupId, ParamId, ParamKey, ParamStore};
pub use tensor::{Scalar, Tensor};

/// Negative slope used by every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;
