//! Toolkit for adapting transformer encoders to legal text.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod objectives;
pub mod tasks;
pub mod tokenizer;

pub use error::{Error, Result};
