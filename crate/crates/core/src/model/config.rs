use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::promptkit::VOCAB_SIZE;

/// Which linear layers receive a LoRA adapter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraTarget {
    /// Attention q/k/v/o and MLP gate/up/down in every block. Embeddings
    /// and the output head stay plain.
    #[default]
    AllLinear,
    /// All block linears plus the output head.
    AllLinearAndHead,
}

impl LoraTarget {
    pub fn adapts_head(self) -> bool {
        matches!(self, LoraTarget::AllLinearAndHead)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_sequence_length: usize,
    pub lora_r: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub lora_target: LoraTarget,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_sequence_length: 1024,
            lora_r: 64,
            lora_alpha: 16.0,
            lora_dropout: 0.1,
            lora_target: LoraTarget::AllLinear,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_sequence_length", self.max_sequence_length),
            ("lora_r", self.lora_r),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::Config(format!(
                "lora_dropout must lie in [0, 1), got {}",
                self.lora_dropout
            )));
        }
        if !self.lora_alpha.is_finite() {
            return Err(Error::Config("lora_alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_r as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_configs() {
        let bad = ModelConfig {
            d_model: 6,
            n_heads: 4,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            lora_r: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            lora_dropout: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn table_scale() {
        assert_eq!(ModelConfig::default().lora_scale(), 0.25);
    }
}
