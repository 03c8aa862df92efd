//! Dense tensors, a reverse-mode tape and the layers built on it.

pub mod nn;
mod params;
mod tape;
mod tensor;

pub use params::{adam_step, AdamConfig, ParamGrads, ParamId, ParameterStore};
pub use tape::{AttnShape, Gradients, Tape, Var};
pub use tensor::{log_sum_exp, softmax_with_temperature, Tensor};
