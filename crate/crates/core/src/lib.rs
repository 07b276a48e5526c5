//! Proactive out-of-distribution detection with a transformer digital twin.

pub mod dtc;
pub mod dtm;
pub mod error;
pub mod eval;
pub mod explain;
pub mod rng;
pub mod synth;
pub mod timeseries;

pub use error::{Error, Result};
