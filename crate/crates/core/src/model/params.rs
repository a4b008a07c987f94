use std::borrow::Cow;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::quant::{self, QuantMode, QuantizedTensor};
use crate::seed;

pub const INIT_STD: f64 = 0.02;

/// Low-rank update `(alpha / r) * B * A` attached to one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r x d_in`
    pub a: Array2<f64>,
    /// `d_out x r`
    pub b: Array2<f64>,
    pub alpha: f64,
    pub r: usize,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    fn check_shapes(&self) -> Result<()> {
        if self.a.nrows() != self.r || self.b.ncols() != self.r {
            return Err(Error::Shape(format!(
                "adapter rank {} but A is {:?} and B is {:?}",
                self.r,
                self.a.dim(),
                self.b.dim()
            )));
        }
        Ok(())
    }
}

pub fn lora_delta(adapter: &LoraAdapter) -> Result<Array2<f64>> {
    adapter.check_shapes()?;
    Ok(adapter.b.dot(&adapter.a) * adapter.scale())
}

/// Frozen base weight, held in full precision or 4-bit form.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenWeight {
    Dense(Array2<f64>),
    Quantized(QuantizedTensor),
}

impl FrozenWeight {
    pub fn dim(&self) -> (usize, usize) {
        match self {
            FrozenWeight::Dense(w) => w.dim(),
            FrozenWeight::Quantized(q) => (q.shape[0], q.shape[1]),
        }
    }

    /// Dense view, dequantizing if needed.
    pub fn dense(&self) -> Result<Cow<'_, Array2<f64>>> {
        match self {
            FrozenWeight::Dense(w) => Ok(Cow::Borrowed(w)),
            FrozenWeight::Quantized(q) => Ok(Cow::Owned(quant::dequantize(q)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: FrozenWeight,
    pub adapter: Option<LoraAdapter>,
}

impl Linear {
    fn check(&self) -> Result<()> {
        if let Some(ad) = &self.adapter {
            ad.check_shapes()?;
            if (ad.d_out(), ad.d_in()) != self.weight.dim() {
                return Err(Error::Shape(format!(
                    "adapter delta {:?} does not match weight {:?}",
                    (ad.d_out(), ad.d_in()),
                    self.weight.dim()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Array1<f64>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub mlp_norm: Array1<f64>,
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
}

pub(crate) const BLOCK_LINEARS: [&str; 7] = ["wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"];

impl Block {
    pub(crate) fn linears(&self) -> [&Linear; 7] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn linears_mut(&mut self) -> [&mut Linear; 7] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Borrowed view of one named tensor, used for serialization and
/// freeze checks.
#[derive(Debug, Clone, Copy)]
pub enum TensorRef<'a> {
    Matrix(&'a Array2<f64>),
    Vector(&'a Array1<f64>),
    Quantized(&'a QuantizedTensor),
}

/// All model weights. Everything except the LoRA `A`/`B` matrices is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub final_norm: Array1<f64>,
    pub head: Linear,
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Base weights ~ N(0, 0.02), norm gains 1, and for every adapter
/// A ~ N(0, 0.02) with B = 0, so adapters contribute nothing at init.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = seed::rng_for(seed, "model.init", &[]);
    let d = config.d_model;
    let linear = |rng: &mut rand_chacha::ChaCha8Rng, d_out: usize, d_in: usize, adapt: bool| {
        let weight = FrozenWeight::Dense(gaussian(rng, d_out, d_in));
        let adapter = adapt.then(|| LoraAdapter {
            a: gaussian(rng, config.lora_r, d_in),
            b: Array2::zeros((d_out, config.lora_r)),
            alpha: config.lora_alpha,
            r: config.lora_r,
            dropout: config.lora_dropout,
        });
        Linear { weight, adapter }
    };

    let tok_emb = gaussian(&mut rng, config.vocab_size, d);
    let pos_emb = gaussian(&mut rng, config.max_sequence_length, d);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        blocks.push(Block {
            attn_norm: Array1::ones(d),
            wq: linear(&mut rng, d, d, true),
            wk: linear(&mut rng, d, d, true),
            wv: linear(&mut rng, d, d, true),
            wo: linear(&mut rng, d, d, true),
            mlp_norm: Array1::ones(d),
            w_gate: linear(&mut rng, config.d_ff, d, true),
            w_up: linear(&mut rng, config.d_ff, d, true),
            w_down: linear(&mut rng, d, config.d_ff, true),
        });
    }
    let head = linear(
        &mut rng,
        config.vocab_size,
        d,
        config.lora_target.adapts_head(),
    );
    Ok(Parameters {
        config: config.clone(),
        tok_emb,
        pos_emb,
        blocks,
        final_norm: Array1::ones(d),
        head,
    })
}

impl Parameters {
    /// Every linear layer in canonical order: per block q, k, v, o, gate,
    /// up, down; then the head.
    pub fn linears(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 7 + 1);
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, lin) in BLOCK_LINEARS.iter().zip(block.linears()) {
                out.push((format!("blocks.{i}.{name}"), lin));
            }
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = Vec::with_capacity(self.blocks.len() * 7 + 1);
        for block in &mut self.blocks {
            out.extend(block.linears_mut());
        }
        out.push(&mut self.head);
        out
    }

    pub fn adapters(&self) -> Vec<(String, &LoraAdapter)> {
        self.linears()
            .into_iter()
            .filter_map(|(name, lin)| lin.adapter.as_ref().map(|a| (name, a)))
            .collect()
    }

    /// Names of trainable tensors, aligned with [`Self::trainables`].
    pub fn trainable_names(&self) -> Vec<String> {
        self.adapters()
            .into_iter()
            .flat_map(|(name, _)| [format!("{name}.lora_a"), format!("{name}.lora_b")])
            .collect()
    }

    pub fn trainables(&self) -> Vec<&Array2<f64>> {
        self.adapters()
            .into_iter()
            .flat_map(|(_, ad)| [&ad.a, &ad.b])
            .collect()
    }

    pub fn trainables_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.linears_mut()
            .into_iter()
            .filter_map(|lin| lin.adapter.as_mut())
            .flat_map(|ad| [&mut ad.a, &mut ad.b])
            .collect()
    }

    /// Every frozen tensor by name.
    pub fn frozen_tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = vec![
            ("tok_emb".to_string(), TensorRef::Matrix(&self.tok_emb)),
            ("pos_emb".to_string(), TensorRef::Matrix(&self.pos_emb)),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), TensorRef::Vector(&block.attn_norm)));
            out.push((format!("blocks.{i}.mlp_norm"), TensorRef::Vector(&block.mlp_norm)));
        }
        out.push(("final_norm".to_string(), TensorRef::Vector(&self.final_norm)));
        for (name, lin) in self.linears() {
            let t = match &lin.weight {
                FrozenWeight::Dense(w) => TensorRef::Matrix(w),
                FrozenWeight::Quantized(q) => TensorRef::Quantized(q),
            };
            out.push((format!("{name}.weight"), t));
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d_model;
        if self.tok_emb.dim() != (self.config.vocab_size, d)
            || self.pos_emb.dim() != (self.config.max_sequence_length, d)
            || self.blocks.len() != self.config.n_layers
        {
            return Err(Error::Shape("embeddings or layer count disagree with config".into()));
        }
        for (name, lin) in self.linears() {
            lin.check().map_err(|e| Error::Shape(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Replace every dense linear base weight by its 4-bit form. Embeddings,
    /// norms, and adapters stay in full precision.
    pub fn quantize_base(&mut self, block_size: usize, mode: QuantMode) -> Result<()> {
        for lin in self.linears_mut() {
            if let FrozenWeight::Dense(w) = &lin.weight {
                lin.weight = FrozenWeight::Quantized(quant::quantize_blockwise(w, block_size, mode)?);
            }
        }
        Ok(())
    }

    pub fn is_quantized(&self) -> bool {
        self.linears()
            .iter()
            .any(|(_, l)| matches!(l.weight, FrozenWeight::Quantized(_)))
    }

    pub fn without_adapters(&self) -> Parameters {
        let mut out = self.clone();
        for lin in out.linears_mut() {
            lin.adapter = None;
        }
        out
    }

    /// Fold every adapter into its base weight: `W + (alpha / r) * B * A`.
    /// The result holds dense weights and no adapters.
    pub fn merge_adapters(&self) -> Result<Parameters> {
        let mut out = self.clone();
        for lin in out.linears_mut() {
            if let Some(ad) = lin.adapter.take() {
                let merged = lin.weight.dense()?.into_owned() + lora_delta(&ad)?;
                lin.weight = FrozenWeight::Dense(merged);
            }
        }
        Ok(out)
    }

    pub fn n_trainable(&self) -> usize {
        self.trainables().iter().map(|t| t.len()).sum()
    }
}
