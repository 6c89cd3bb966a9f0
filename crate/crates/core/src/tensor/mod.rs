//! Dense matrices, a reverse-mode tape over them, and a finite-difference checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use matrix::Matrix;
pub use tape::{
    group_soft_threshold_values, row_softmax_values, soft_threshold_values, Gradients, GroupAxis,
    Tape, Var,
};
