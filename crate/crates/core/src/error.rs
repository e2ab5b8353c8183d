use alloc::boxed::Box;
use alloc::string::String;

use crate::model::Model;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    /// Training produced a non-finite loss; carries the parameters at the
    /// start of the offending mini-batch.
    #[error("non-finite loss at optimizer step {step}")]
    Diverged { step: usize, snapshot: Box<Model> },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
