//! Failure detection for image classifiers using a vision-language prior.

pub mod attribute_bank;
pub mod augment;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod explain;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pim;
pub mod pipeline;
pub mod report;
pub mod scenario;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
