//! hp-adaptive finite elements driven by locally predicted energy-error reductions.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adaptivity;
pub mod assembly;
pub mod basis;
pub mod constraint;
pub mod error;
pub mod mesh;
pub mod predictor;
pub mod problems;
pub mod space;

pub use error::{Error, Result};
