//! Numeric core: reverse-mode graph, parameters, losses and the optimizer.

mod graph;
mod gradcheck;
pub mod kernels;
mod losses;
mod optim;
mod params;

pub use graph::{Gradients, Graph, NodeId, PROB_FLOOR};
pub use gradcheck::{grad_check, GradCheckReport};
pub use losses::{cross_entropy, one_hot, softmax, softmax_with_temperature, uniform};
pub use optim::{AdamWConfig, OptimizerState, Schedule};
pub use params::{Group, Param, ParamId, ParameterSet, WeightSnapshot};
