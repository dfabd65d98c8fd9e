//! Three-level multiplexed readout: simulation, matched-filter features,
//! leakage clustering, per-qubit discriminators and evaluation.

pub mod cluster;
pub mod dataset;
pub mod dataset_file;
pub mod discriminant;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod json;
pub mod linalg;
pub mod mlp;
pub mod pipeline;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
