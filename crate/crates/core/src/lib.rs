pub mod data;
pub mod error;
pub mod evaluation;
pub mod bench;
pub mod cli;
pub mod consistency;
pub mod model;
pub mod rng;
pub mod screening;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::Tensor;
