pub mod data;
pub mod encoder;
pub mod error;
pub mod model;
pub mod posattn;
pub mod tensor;

pub use error::{Error, Result};
pub mod eval;
pub mod train;
pub mod check;
pub mod config;
pub mod cli;
