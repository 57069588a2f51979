//! Dense `f64` tensors, an eager reverse-mode autodiff tape, named parameter
//! sets with a binary checkpoint format, and row-masked optimizers.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{AttnSpan, Gradients, Graph, Var};
pub(crate) use graph::{log_sum_exp, softmax_in_place};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, RowGradientMask, Schedule};
pub use params::{Param, ParameterSet, CHECKPOINT_MAGIC};
pub use tensor::Tensor;
pub(crate) use tensor::dot;
