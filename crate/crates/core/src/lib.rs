//! Encoder-free multimodal decoder pipeline at desk scale.

pub mod bench;
pub mod error;
pub mod eval;
pub mod instruct;
pub mod lora;
pub mod model;
pub mod patch;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Graph, Tensor, Var};
