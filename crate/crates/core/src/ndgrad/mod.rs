//! Dense `f64` tensors, reverse-mode differentiation, Adam, and the `CLDR`
//! checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::{finite_diff_check, finite_diff_report, GradCheck};
pub use graph::{sigmoid, BatchStats, BnMode, Gradients, Graph, Var, BN_EPS};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
