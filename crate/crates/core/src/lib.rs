pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod export;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod mode;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Real, Shape, Tape, Tensor, Var};
