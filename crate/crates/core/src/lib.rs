//! Train small activation-free prediction networks for video coding, collapse
//! them into single-layer equivalents and measure what the collapse costs.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chroma;
pub mod collapse;
pub mod error;
pub mod formats;
pub mod interp;
pub mod intra;
pub mod metrics;
mod optim;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
