//! Dense tensors, reverse-mode differentiation, and optimization.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GroupGrads, MultiObjective, Objective};
pub use optim::{adamw_step, clip_grad_norm, lr_at, AdamWConfig, AdamWState, ParamGroup, Schedule};
pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::Tensor;
