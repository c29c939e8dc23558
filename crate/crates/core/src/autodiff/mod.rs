//! Dense `f64` reverse-mode autodiff: tensors, the recording graph, and
//! parameter optimisation.

mod check;
mod graph;
mod optim;
mod tensor;

pub use check::{finite_diff_grad, max_rel_err};
pub use graph::{Gradients, Graph, Var, NORM_EPS};
pub use optim::{
    sgd_step, LrSchedule, Optimizer, OptimizerKind, ParamId, ParamRegistry, ScheduleKind,
};
pub use tensor::Tensor;
