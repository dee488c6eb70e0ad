//! Minimal differentiable kernel: matrices, a recording graph with
//! reverse-mode gradients, layers, Adam and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod matrix;
pub mod optim;
pub mod params;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use kernels::Parallelism;
pub use layers::{linear_forward, mhsa_block_forward, mlp3_forward, softmax, Activation};
pub use matrix::{cosine, dot, l2_norm, Matrix};
pub use optim::{adam_step, lr_at_epoch, AdamState};
pub use params::ParamStore;
