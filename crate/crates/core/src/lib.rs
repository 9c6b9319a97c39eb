//! Hybrid LSTM / 1D-CNN traffic flow forecasting with missing-data handling.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod hybrid;
pub mod imputation;
pub mod layers;
pub mod pipeline;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
