//! Deterministic numeric substrate: generator, distributions, dense matrices,
//! finite-difference checking.

mod dist;
mod gradcheck;
mod matrix;
mod rng;

pub use dist::{sample, DistSpec};
pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use matrix::{axpy, dot, l2_norm, matmul_at_acc, matmul_bt_into, matmul_into, Matrix};
pub use rng::Rng;
