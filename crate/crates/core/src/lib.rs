pub mod augment;
pub mod config;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod graph;
pub mod harness;
pub mod model;
pub mod params;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub mod workflow;
