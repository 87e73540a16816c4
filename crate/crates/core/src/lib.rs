pub mod abstraction;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod linking;
pub mod matching;
pub mod model;
pub mod nn;
pub mod suites;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
