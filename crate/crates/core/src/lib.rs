pub mod error;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod datasim;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use tensor::{Float, Tape, Tensor, Var};
