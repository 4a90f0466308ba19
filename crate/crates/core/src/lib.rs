pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod moco;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
