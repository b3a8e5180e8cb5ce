//! Dense float64 tensors, reverse-mode differentiation, neural layers and
//! the Adam optimizer shared by every trainable component.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use graph::{log_sum_exp, sigmoid, softmax, Gradients, Graph, Var};
pub use params::{init_range, init_uniform, ParameterSet};
pub use tensor::Tensor;
