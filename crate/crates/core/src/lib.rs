pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod model;
pub mod multires;
pub mod phantom;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tape, Var};
