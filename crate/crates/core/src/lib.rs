// Guards are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundary;
pub mod engine;
pub mod error;
pub mod fft2;
pub mod grid;
pub mod interp;
pub mod kernel;
pub mod mc;
pub mod model;
pub mod timestep;

#[cfg(test)]
mod testutil;

pub use error::{GmwbError, Result};
