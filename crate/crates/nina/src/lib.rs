//! Conditional normalizing-flow action decoder with affine coupling and PLU
//! layers, a matched DDPM baseline, synthetic oracle-checkable tasks, and a
//! benchmark harness.

pub mod bench;
pub mod checkpoint;
pub mod conditioners;
pub mod config;
pub mod ddpm;
pub mod decoder;
pub mod error;
pub mod flows;
pub mod harness;
pub mod nn;
pub mod params;
pub mod runrecord;
pub mod tape;
pub mod taskgen;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;

pub use error::{Error, Result};
