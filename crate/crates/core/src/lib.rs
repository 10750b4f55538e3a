pub mod autograd;
pub mod blendfake;
pub mod bridging;
pub mod error;
pub mod eval;
pub mod ingestion;
pub mod labels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
