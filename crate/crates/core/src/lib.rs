//! Selective state-space encoders over functional network connectivity.
//!
//! Everything here is `no_std` with `alloc`; file formats and the CLI live in
//! the `fstmamba` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attribution;
pub mod autodiff;
pub mod dfnc;
pub mod error;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rope;
pub mod ssm;
pub mod tensor;
pub mod topology;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
