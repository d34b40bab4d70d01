pub mod autodiff;
pub mod binio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod ctc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
