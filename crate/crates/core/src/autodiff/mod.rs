//! Minimal reverse-mode differentiation: tape, parameter store, and a
//! finite-difference gradient checker.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{BoundParams, Param, ParameterStore};
pub(crate) use params::Cursor;
pub use tape::{Tape, Var, LAYER_NORM_EPS};
