pub mod aggregators;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradient_suite;
pub mod losses;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod sampling;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
