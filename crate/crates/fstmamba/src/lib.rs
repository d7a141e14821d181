//! File formats, configuration, the invariant suite and the command-line
//! surface around `fstmamba-core`.

pub mod atlas;
pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod heatmap;
pub mod manifest;

pub use error::{Error, Result};
