pub mod baselines;
pub mod calibration;
pub mod data;
pub mod embedding;
pub mod error;
pub mod nplm;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod synthetic;

pub use data::LabeledDataset;
pub use error::{Error, Result};
