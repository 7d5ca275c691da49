pub mod checkpoint;
pub mod data;
pub mod error;
pub mod instrument;
pub mod lisa;
pub mod lora;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
