// SPDX-License-Identifier: Apache-2.0

//! Dense arrays and the reverse-mode tape every network in the crate is
//! built on.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{compare_gradients, grad_check, relative_error, GradCheckConfig, GradCheckReport, Stencil};
pub use tape::{Gradients, Tape, Var};

