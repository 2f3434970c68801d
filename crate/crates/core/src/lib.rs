//! Human-context language modeling at desk scale: a small causal
//! transformer with an optional recurrent user state, the training regimes
//! built around it, and the evaluation statistics used to compare them.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod eval;
pub mod human_context;
pub mod objectives;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
