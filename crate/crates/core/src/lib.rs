pub mod augment;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod diagnostics;
pub mod episodes;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
