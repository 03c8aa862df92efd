//! Residual-quantized tokenization of observation and macro-action trajectories, an
//! autoregressive prior over code stacks, and tree search over the resulting latent
//! action space.

pub mod diffmath;
pub mod envs;
pub mod error;
pub mod planner;
pub mod prior;
pub mod rqvae;
pub mod trajectory;

pub use error::{ItapError, Result};
