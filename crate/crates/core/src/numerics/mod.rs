//! Tensors, reverse-mode autodiff, AdamW, seeded randomness and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, single_param_store, GradCheck};
pub use graph::{softmax_f64, Gradients, Graph, Var};
pub use optim::{AdamW, ParamId, ParamStore};
pub use real::Real;
pub use rng::{streams, RngState};
pub use tensor::Tensor;
