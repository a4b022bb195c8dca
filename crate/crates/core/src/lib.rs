// Negated float comparisons such as `!(x > 0.0)` are used on purpose: they
// also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cli;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
