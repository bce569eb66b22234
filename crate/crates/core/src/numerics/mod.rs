//! Dense tensors, reverse-mode differentiation and gradient verification.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{check_param_gradients, finite_diff_grad, relative_error, ParamCheck, GRAD_FLOOR};
pub use graph::{Backward, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore, Parameter, Parameterized};
pub use rng::RngStream;
pub use tensor::Tensor;
