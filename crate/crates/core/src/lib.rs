pub mod autodiff;
pub mod checkpoint;
mod codec;
pub mod data;
pub mod error;
pub mod fusion;
pub mod mine;
pub mod model;
pub mod nn;
pub mod pooling;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Graph, Var};
pub use error::{Error, ErrorKind, FormatError, Result};
pub use nn::{Leaves, Linear, Parameters};
pub use tensor::Tensor;
