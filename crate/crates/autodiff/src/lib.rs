//! Dense tensors with forward-mode (JVP) and reverse-mode differentiation
//! over a fixed, enumerated set of primitives.
//!
//! A [`Graph`] records operations as they execute. Inputs may carry tangents,
//! which propagate eagerly; [`Graph::backward`] replays the record in reverse
//! to produce parameter gradients. `stop_gradient` blocks both.

mod backward;
mod diff;
mod element;
mod error;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use backward::Gradients;
pub use diff::{backward, finite_diff_jvp, jvp, jvp_with, DualTensor};
pub use element::{DType, Element};
pub use error::{AutodiffError, Result};
pub use graph::{broadcast_shapes, Graph, Primitive, PrimitiveSet, Var};
pub use params::{BoundParams, GradSet, ParamSet};
pub use tensor::Tensor;
