pub mod activations;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
