//! Dense matrices, reverse-mode differentiation and the Adam optimizer.

mod adam;
pub(crate) mod matrix;
mod params;
mod sparse;
mod tape;

pub use adam::AdamState;
pub use matrix::{sq_dist, Matrix};
pub use params::{Param, ParamId, ParamStore};
pub use sparse::Csr;
pub use tape::{softmax_rows, Tape, Var};
