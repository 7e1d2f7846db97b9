//! Tensor math, tape-based reverse-mode autodiff, AdamW, and the
//! learning-rate staircase.

pub(crate) mod kernels;
mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use optim::{adamw_step, AdamWHyper, OptimState};
pub use params::{GroupName, NamedTensor, ParamGroup, ParamId, ParamSet};
pub use schedule::{lr_at, LrSchedule};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
