//! Dense tensors, tape-based reverse-mode autodiff, and the Adam optimizer.

mod adam;
mod array;
mod conv;
mod elementwise;
mod gradcheck;
pub mod linalg;
mod params;
mod shape;
mod tape;

pub use adam::AdamState;
pub use array::Tensor;
pub use conv::Padding;
pub use gradcheck::{finite_diff_at, finite_diff_grad, rel_err};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
