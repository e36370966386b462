pub mod bench;
pub mod cli;
pub mod corpus;
pub mod crf;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod numerics;
pub mod quant;
pub mod trainer;

pub use error::{Error, Result};
