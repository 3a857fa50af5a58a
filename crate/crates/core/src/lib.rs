//! Odor-presence decoding from olfactory-bulb LFP trials.

pub mod datasets;
pub mod dsp;
pub mod eval;
pub mod error;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
