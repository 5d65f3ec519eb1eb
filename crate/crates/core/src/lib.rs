pub mod analysis;
pub mod cli;
pub mod copa;
pub mod data;
pub mod error;
pub mod model;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
