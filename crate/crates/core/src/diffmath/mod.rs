//! Dense arrays, reverse-mode differentiation and a finite-difference oracle.

mod array;
mod gradcheck;
mod sparse;
mod tape;

pub use array::{gemm, Array};
pub use gradcheck::{grad_check, grad_check_many, primitive_suite, relative_error, DEFAULT_STEP};
pub use sparse::Csr;
pub use tape::{AttnBlock, Gradients, Tape, Var};

pub(crate) use tape::softmax_rows;
