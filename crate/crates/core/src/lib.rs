// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
mod binfmt;
pub mod error;
pub mod experiment;
pub mod nnet;
pub mod quantizer;
pub mod rng;
pub mod shq;
pub mod signal;
pub mod trainer;

pub use error::{Error, Result};
