//! Dense-matrix numerics with reverse-mode differentiation.

mod check;
mod matrix;
mod ops;
mod optim;
mod tape;

pub use check::{finite_diff_check, max_relative_error, numeric_gradient};
pub use matrix::Matrix;
pub use ops::{cross_entropy_rows, mean_row_entropy, row_mean, scaled_l2_normalize, LOG_FLOOR};
pub use optim::{Adam, Parameter};
pub use tape::{Gradients, Tape, Var};

pub use tape::fault;
