//! Self-knowledge distillation from a lower-layer probe for learning label
//! ambiguity distributions, with the comparison baselines, metrics and a
//! synthetic corpus generator.

// NaN-rejecting range checks read as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
