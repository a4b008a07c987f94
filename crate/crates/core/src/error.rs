use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("cannot read {path}: {source}")]
    Ingest {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("token id {id} is outside the vocabulary (size {vocab_size})")]
    Token { id: u32, vocab_size: usize },

    #[error("decoded bytes are not valid UTF-8")]
    Utf8,

    #[error("pack error: {0}")]
    Pack(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("loss error: {0}")]
    Loss(String),

    #[error("quantization error: {0}")]
    Quant(String),

    #[error("non-finite gradient in {tensor} at step {step}")]
    NonFiniteGradient { tensor: String, step: u64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("train error: {0}")]
    Train(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
