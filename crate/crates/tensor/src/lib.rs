//! Small dense-tensor toolkit: `f64` tensors, a dynamic reverse-mode autodiff
//! graph, MLP layers, SGD/Adam, parameter checkpoints and finite-difference
//! gradient checks.

mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
pub mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use nn::{Linear, Mlp};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::{Bound, ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::Tensor;
