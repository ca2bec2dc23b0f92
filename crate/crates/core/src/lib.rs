pub mod analysis;
pub mod data;
pub mod error;
pub mod model;
pub mod params;
pub mod prompt;
pub mod run;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Result, SspError};
pub use tensor::{Tape, Tensor, Var};
