//! Minimal reverse-mode automatic differentiation over dense arrays.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{
    analytic_gradients, compare_gradients, compare_gradients_steps, evaluate, gradcheck,
    gradcheck_steps, relative_error, relative_error_floor, Coverage, GradcheckReport,
    GRADIENT_FLOOR,
};
pub use tape::{Gradients, Tape, Var};
