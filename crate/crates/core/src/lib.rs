//! Rectified-flow training, reflow and sampling on a small tape autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod frontend;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ode;
pub mod pipeline;
pub mod reflow;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
