//! Instruction tuning at desk scale: JSONL QA ingestion, prompt templating,
//! LoRA fine-tuning of a small decoder over a 4-bit frozen base, and
//! multiple-choice evaluation by option likelihood.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod promptkit;
pub mod quant;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
