pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod pipeline;
pub mod tasks;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tape, Tensor, Var};
