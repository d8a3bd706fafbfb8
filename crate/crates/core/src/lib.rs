pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod report;
pub mod schedule;
pub mod teacher;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
