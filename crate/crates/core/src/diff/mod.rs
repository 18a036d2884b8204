//! Reverse-mode differentiable arrays.
//!
//! A [`Graph`] records primitives as they are evaluated; [`Graph::backward`]
//! replays the tape in reverse. [`GradCheck`] is the central-difference
//! oracle every rule is tested against, and [`Adam`] updates a
//! [`ParamStore`] from the resulting gradients.

mod adam;
mod backward;
mod gradcheck;
mod graph;
mod kernels;
mod real;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState, NonFinitePolicy, ParamStore};
pub use backward::Gradients;
pub use gradcheck::{relative_error, GradCheck, GradCheckReport};
pub use graph::{Graph, Var, L2_NORM_EPS, LAYER_NORM_EPS};
pub use real::{Precision, Real};
pub use tensor::Tensor;
