//! Tiny decoder-only transformer with frozen base weights and LoRA adapters.

mod config;
mod forward;
mod params;

pub use config::{LoraTarget, ModelConfig};
pub use forward::{backward, forward, forward_many, log_softmax, loss, LoraGrads, Mode, Session};
pub use params::{
    init_model, lora_delta, Block, FrozenWeight, Linear, LoraAdapter, Parameters, TensorRef,
    INIT_STD,
};
