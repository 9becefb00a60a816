//! Dense `f64` tensors with tape-based reverse-mode differentiation, SGD and
//! Adam, global-norm gradient clipping and a finite-difference checker.

pub mod check;
mod error;
mod graph;
mod optim;
mod tensor;

pub use error::{DiffError, Result};
pub use graph::{softmax, Gradients, Graph, Var};
pub use optim::{clip_grad_norm, Optimizer, OptimizerKind};
pub use tensor::{ParamGrads, ParamId, ParamStore, Tensor};
