#![allow(dead_code)]

pub mod scorers;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smmini_core::corpus::{Corpus, Manifest, QARecord};
use smmini_core::model::{self, LoraTarget, Mode, ModelConfig, Parameters};
use smmini_core::quant::QuantMode;
use smmini_core::trainer::{mean_loss, TrainConfig, Trainer};

/// Two-layer toy model with d_model 32, the full byte vocabulary, and rank-4
/// adapters.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        d_ff: 64,
        max_sequence_length: 64,
        lora_r: 4,
        lora_alpha: 8.0,
        lora_dropout: 0.1,
        ..Default::default()
    }
}

/// Initialized model whose adapters have been given random nonzero values,
/// so every gradient path is exercised.
pub fn toy_model(seed: u64) -> Parameters {
    let mut params = model::init_model(&toy_config(), seed).unwrap();
    randomize_adapters(&mut params, seed, 0.3);
    params
}

pub fn randomize_adapters(params: &mut Parameters, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in params.trainables_mut() {
        t.mapv_inplace(|_| rng.random_range(-std..std));
    }
}

pub fn random_tokens(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..259)).collect()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Tolerance on the relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;

/// Largest relative error between analytic and central-difference gradients
/// over every trainable element, and the number of elements checked.
///
/// A central difference carries roundoff of about `eps * |loss| / h`
/// (6e-11 for a loss of 5.5 at h = 1e-5). Gradients smaller than
/// `2 * eps * |loss| / (h * GRAD_TOL)` cannot be resolved to `GRAD_TOL`, so
/// the relative error's denominator is floored there.
pub fn finite_difference_check(
    params: &Parameters,
    tokens: &[u32],
    targets: &[u32],
    mask: &[bool],
    mode: Mode,
    seed: u64,
    h: f64,
) -> (f64, usize) {
    let (loss, grads) = model::backward(params, tokens, targets, mask, mode, seed).unwrap();
    let floor = 2.0 * f64::EPSILON * loss.abs() / (h * GRAD_TOL);
    let loss_at = |p: &Parameters| {
        let logits = model::forward(p, tokens, mode, seed).unwrap();
        model::loss(&logits, targets, mask).unwrap()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = params.clone();
    for (ti, analytic) in grads.tensors.iter().enumerate() {
        for idx in 0..analytic.len() {
            let orig = probe.trainables()[ti].as_slice().unwrap()[idx];
            probe.trainables_mut()[ti].as_slice_mut().unwrap()[idx] = orig + h;
            let up = loss_at(&probe);
            probe.trainables_mut()[ti].as_slice_mut().unwrap()[idx] = orig - h;
            let down = loss_at(&probe);
            probe.trainables_mut()[ti].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

/// 32 short records: one shared question shape, a box number, and one of
/// four colors as the answer.
pub fn micro_corpus() -> Corpus {
    let colors = ["red", "blue", "green", "gold"];
    Corpus {
        records: (0..32)
            .map(|i| QARecord::new("micro", "", format!("What color is box {i}?"), colors[i % 4]))
            .collect(),
        manifest: Manifest::default(),
    }
}

/// Small model for the overfit run.
///
/// The head carries an adapter here. With a frozen N(0, 0.02) head and unit
/// RMSNorm gain, every logit is bounded by about 0.02 * d_model = 1.28, which
/// keeps the loss above 3 whatever the block adapters learn. The adapter
/// scale alpha/r is 8; the default alpha 16 at this width does not converge
/// in 500 steps at lr 2e-4.
pub fn overfit_model_config() -> ModelConfig {
    ModelConfig {
        lora_target: LoraTarget::AllLinearAndHead,
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        d_ff: 128,
        max_sequence_length: 128,
        lora_r: 8,
        lora_alpha: 64.0,
        lora_dropout: 0.1,
        ..Default::default()
    }
}

/// Default optimizer settings at desk scale: AdamW, constant lr 2e-4,
/// batch 8, sequence length 128.
pub fn overfit_train_config(max_steps: u64) -> TrainConfig {
    TrainConfig {
        sequence_length: 128,
        minibatch_size: 8,
        epochs: 1000,
        max_steps: Some(max_steps),
        seed: 3,
        ..Default::default()
    }
}

pub struct OverfitResult {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: u64,
    pub params: Parameters,
}

/// Train a 4-bit (absmax) base model on the micro-corpus and measure the
/// eval-mode training loss before and after.
pub fn run_overfit(max_steps: u64) -> OverfitResult {
    let mut params = model::init_model(&overfit_model_config(), 1).unwrap();
    params.quantize_base(64, QuantMode::AbsmaxInt4).unwrap();
    let mut trainer = Trainer::new(params, overfit_train_config(max_steps), &micro_corpus()).unwrap();
    let initial_loss = mean_loss(&trainer.params, trainer.train_set()).unwrap();
    trainer.run(|_| {}).unwrap();
    let final_loss = mean_loss(&trainer.params, trainer.train_set()).unwrap();
    OverfitResult {
        initial_loss,
        final_loss,
        steps: trainer.step,
        params: trainer.params,
    }
}

/// Train in single-threaded mode.
pub fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}
