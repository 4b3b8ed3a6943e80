//! Reverse-mode differentiation over the crate's primitive set.
//!
//! Layers record themselves onto a [`Tape`]; [`Tape::backward`] walks the
//! recording in reverse. Permutation ops backpropagate by scatter-add, which
//! for a bijective table is exactly the inverse permutation.

mod check;
mod optim;
mod params;
mod tape;

pub use check::{
    central_difference, finite_diff_check, relative_error, FdConfig, GradReport, ParamGradError,
    REL_FLOOR,
};
pub use optim::{sgd_step, Adam};
pub use params::{scoped, uniform, Bindings, Params};
pub use tape::{Gradients, Tape, Var};
