//! Dense tensors, a reverse-mode tape, Adam, and low-rank adapters.

mod adapter;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use adapter::AdapterizedWeight;
pub use gradcheck::{finite_diff_check, finite_diff_check_params, relative_error, REL_FLOOR};
pub use graph::{Grads, Graph, Var};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamKind, ParamSet, Trainable};
pub use tensor::Tensor;
