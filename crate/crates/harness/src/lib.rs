//! Persistence, training loops, evaluation and benchmarking around the `itap` core.

mod binio;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod stats;
pub mod train;

pub use error::{HarnessError, Result};
