//! Frame-classification toolkit built around time-convolved bidirectional
//! LSTM models: dense tensor kernels, the layer zoo with exact backward
//! passes, architecture variants, minibatch SGD with geometric learning-rate
//! decay, an asynchronous parameter-server harness, a synthetic temporal
//! task, binary dataset/checkpoint formats, and finite-difference
//! verification oracles.

pub mod asgd;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
