//! Backend-agnostic evaluation harness for multiple-choice question
//! answering with option-ID process-of-elimination and prior debiasing.

pub mod backend;
pub mod cli;
pub mod core;
pub mod data;
pub mod debias;
pub mod elimination;
pub mod error;
pub mod eval;
pub mod methods;
pub mod prompt;

pub use error::{Error, Result};
