//! Dense-matrix kernels: products, softmax, seeded initialization, SGD and a
//! finite-difference gradient oracle.

mod gradcheck;
mod matrix;
mod rng;
mod sgd;

pub use gradcheck::{grad_check, numeric_gradient, relative_error, GradCheckReport, DEFAULT_STEP};
pub use matrix::{argmax, softmax_rows, Matrix};
pub(crate) use matrix::{dot, l2_norm, log_sum_exp, softmax_in_place};
pub use rng::{init_matrix, InitScheme, Rng};
pub use sgd::{sgd_step, SgdConfig};
