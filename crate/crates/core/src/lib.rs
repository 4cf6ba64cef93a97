//! Knowledge-aware artifact image synthesis: corpus handling, LLM prompt
//! enhancement, diffusion finetuning with auxiliary supervision, and evaluation.

pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod ops;
pub mod prompt;
pub mod supervision;
pub mod trainer;

pub use error::{Error, Result};
