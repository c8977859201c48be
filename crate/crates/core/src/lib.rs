//! Scheduled sampling over training steps and decoding steps for small
//! encoder-decoder transformers, with the tape, kernels, data generators,
//! decoding and metrics needed to run the experiments on a CPU.

pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod run;
pub mod sampler;
pub mod schedules;
pub mod tensor;

pub use error::{Error, Result};
