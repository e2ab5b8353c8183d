//! File formats, synthetic data, checkpoints and command-line plumbing around
//! `agam-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod gradcheck_suite;
pub mod image;
pub mod metrics;
pub mod synth;
pub mod tensor_file;

pub use error::{Error, Result};
