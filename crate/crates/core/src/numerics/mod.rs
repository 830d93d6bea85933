//! Dense tensors, a recorded operation graph with reverse-mode gradients, and
//! the finite-difference gradient checker.

mod dd;
mod gradcheck;
mod graph;
mod init;
mod params;
mod tensor;

pub use dd::Dd;
pub use gradcheck::{grad_check, grad_check_refined, relative_error, Coverage, GradCheckReport, LossFn, ParamCheck, Refine};
pub use init::Init;
pub use graph::{Elementwise, Gradients, Graph, Operand, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
