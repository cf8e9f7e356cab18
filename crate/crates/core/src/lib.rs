//! Closed-form least-squares polynomial approximants of single-hidden-layer
//! MLPs and gated linear units under Gaussian and Gaussian-mixture inputs.

// negated comparisons deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actint;
pub mod analysis;
pub mod approx;
pub mod bundle;
pub mod error;
pub mod gauss;
pub mod harness;
pub mod master;
pub mod par;
pub mod special;

pub use error::{Error, Result};
