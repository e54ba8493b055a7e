pub mod checkpoint;
pub mod config;
pub mod data;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod loader;
pub mod loss;
pub mod nn;
pub mod preprocess;
pub mod pretrain;
pub mod seed;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
