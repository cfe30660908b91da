//! Minimal differentiable building blocks shared by the segmenter and the
//! audio language model.

mod optim;
mod params;
mod tape;

pub use optim::{Optimizer, OptimizerKind};
pub use params::{glorot, randn, zeros, Mat, ParamId, ParamStore};
pub use tape::{bce_value, sigmoid, Grads, Tape, Var};
