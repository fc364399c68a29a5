//! Dense tensors, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod mask;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{analytic_grad, grad_check, grad_check_coords, numeric_partial, ScalarFn};
pub use mask::BinaryMask;
pub use real::{r, DType, Real};
pub use tape::{apply_rope, rope_tables, softmax_rows, CustomOp, Gradients, Tape, Var};
pub use tensor::{matmul_t, Tensor};

pub(crate) use tape::{sigmoid, softplus};
pub(crate) use tensor::{gemm_into, gemm_views, View};
