//! Learning data-augmentation distributions jointly with model parameters
//! by maximising an augmented evidence lower bound.

pub mod augmentation;
pub mod data;
pub mod distributions;
pub mod elbo;
pub mod error;
pub mod gradengine;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
