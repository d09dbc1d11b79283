pub mod error;
pub mod edl;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
