//! Attributes-guided attention (AGAM) for few-shot recognition.
//!
//! This crate holds the numeric core: a small dense tensor type with
//! reverse-mode differentiation, the dual-branch channel/spatial attention
//! module, the backbone, metric heads, alignment losses and the episodic
//! training/evaluation engine. It is `no_std` (with `alloc`); file formats,
//! dataset generation and the command line live in the `agam` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod agam;
pub mod alignment;
pub mod autodiff;
pub mod engine;
pub mod episode;
mod error;
pub mod gradcheck;
pub mod heads;
pub(crate) mod math;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
