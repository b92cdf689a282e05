//! Deep supervised hashing with a random-VLAD aggregation layer.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod pipeline;
pub mod params;
pub mod real;
pub mod retrieval;
pub mod rng;
pub mod rvssdh;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
