pub mod accounting;
pub mod adaptation;
pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod model;
pub mod params;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
