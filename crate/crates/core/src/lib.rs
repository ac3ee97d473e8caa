pub mod adaptation;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod inference;
pub mod model;
pub mod source_training;
pub mod tensor;

pub use error::{Error, Result};
