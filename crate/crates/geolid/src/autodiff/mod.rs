//! Dense reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Parameters
//! are bound onto the tape through a [`Binder`], and a single call to
//! [`Binder::backward`] yields a [`Gradients`] map keyed by parameter name.
//! [`Var::detach`] passes values forward while stopping gradients.

mod gradcheck;
mod params;
mod suite;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, relative_error, GradcheckReport, FULL_CHECK_LIMIT, RELATIVE_FLOOR};
pub use params::{Binder, Gradients, Parameter, ParameterSet};
pub use suite::{gradcheck_ops, OPS};
pub use tape::{ConvGeom, Grads, Tape, Var};
pub use tensor::{Real, Tensor};

pub(crate) use tape::column_stats;

#[cfg(test)]
mod tests;
