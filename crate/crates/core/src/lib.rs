//! Statistical multiresolution estimation for linear inverse problems
//! observed under Gaussian white noise.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::needless_range_loop)]

pub mod dictionary;
pub mod error;
pub mod grid;
pub mod harness;
pub mod mrstat;
pub mod operators;
pub mod penalties;
pub mod quantile;
pub mod rates;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{Grid, NoiseModel, Signal};
