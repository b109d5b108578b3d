pub mod attention;
pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
