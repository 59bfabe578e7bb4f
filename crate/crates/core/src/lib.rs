pub mod data;
pub mod diffusion;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod linalg;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod plots;
pub mod pool;
pub mod sampling;
pub mod teacher;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
