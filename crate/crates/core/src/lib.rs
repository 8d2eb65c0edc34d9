pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
pub use tensor::Tensor;
