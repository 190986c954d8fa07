pub mod backbone;
pub mod config;
pub mod data;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod training;

pub use error::{Error, Result, ValidationError};
