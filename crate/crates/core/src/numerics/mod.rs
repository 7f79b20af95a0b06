//! Dense tensors, reverse-mode gradients and the finite-difference oracle.

pub mod finite_diff;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use finite_diff::{finite_difference_grad, max_relative_error, relative_error};
pub use ops::{conv1d_strided, matmul, softmax_rows};
pub use rng::SeededRng;
pub use tape::{Tape, Var};
pub use tensor::{Dtype, Real, Tensor};
