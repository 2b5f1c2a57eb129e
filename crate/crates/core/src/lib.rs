pub mod autodiff;
pub mod checkpoint;
pub mod clip;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod image;
pub mod optim;
pub mod refocus;
pub mod rng;
pub mod simulate;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
