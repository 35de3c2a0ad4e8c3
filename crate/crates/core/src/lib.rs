//! Learning-augmented online control with safe action sets.

// NaN must fail validation, so `!(x > 0.0)` is used on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod controllers;
pub mod error;
pub mod harness;
pub mod learning;
pub mod model;
pub mod priors;
pub mod safeset;
pub mod solver;
pub mod traces;
pub mod verify;

pub use error::{LaocError, Result};
