//! Dense matrices, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, ParamSet, Parameters};
pub use matrix::Matrix;
pub use tape::{Gradients, Primitive, Tape, Var, NORM_FLOOR};

pub(crate) use tape::softmax_rows;
