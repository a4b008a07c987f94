//! AdamW fine-tuning of the adapter tensors.
//!
//! Every source of randomness in a run (epoch shuffles, dropout masks) is
//! derived from the run seed and the global step, so a run can stop at any
//! step and resume from a checkpoint on exactly the same trajectory.

mod checkpoint;
mod optim;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    encode_frozen, load_checkpoint, save_checkpoint, Checkpoint, RngState, MAGIC, VERSION,
};
pub use optim::{adamw_step, LrSchedule, OptimizerKind, OptimizerState};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{LoraGrads, Mode, Parameters, Session};
use crate::promptkit::{self, TrainingSequence, MIN_PACK_LEN};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub sequence_length: usize,
    pub grad_accumulation_steps: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clipping threshold; off when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub answer_only_loss: bool,
    /// Stop after this many optimizer steps in total, even mid-epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sequence_length: 1024,
            grad_accumulation_steps: 1,
            minibatch_size: 32,
            epochs: 5,
            optimizer: OptimizerKind::AdamW,
            lr_schedule: LrSchedule::Constant,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
            answer_only_loss: false,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.sequence_length < MIN_PACK_LEN {
            return fail(format!("sequence_length must be >= {MIN_PACK_LEN}"));
        }
        if self.grad_accumulation_steps == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return fail("grad_accumulation_steps, minibatch_size and epochs must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr_schedule.lr_at(self.learning_rate, step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based index of the optimizer step just taken.
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum TrainEvent<'a> {
    Step(&'a StepMetrics),
    EpochEnd(&'a EpochMetrics),
}

/// Render and pack every record; records whose answer cannot fit are
/// dropped and counted.
pub fn prepare_sequences(
    corpus: &Corpus,
    max_len: usize,
    answer_only_loss: bool,
) -> (Vec<TrainingSequence>, usize) {
    let mut skipped = 0;
    let seqs = corpus
        .records
        .iter()
        .filter_map(|rec| {
            let ex = promptkit::render_prompt(rec);
            match promptkit::pack_example(&ex, max_len, answer_only_loss) {
                Ok(seq) if seq.target_mask().iter().any(|&m| m) => Some(seq),
                _ => {
                    skipped += 1;
                    None
                }
            }
        })
        .collect();
    (seqs, skipped)
}

/// Token-weighted mean loss over a set of sequences in eval mode.
pub fn mean_loss(params: &Parameters, seqs: &[TrainingSequence]) -> Result<f64> {
    let session = Session::new(params)?;
    let parts: Vec<(f64, usize)> = seqs
        .par_iter()
        .map(|s| session.nll_sum(s.inputs(), s.targets(), s.target_mask(), Mode::Eval, 0))
        .collect::<Result<_>>()?;
    let (total, count) = parts
        .iter()
        .fold((0.0, 0usize), |(t, c), (pt, pc)| (t + pt, c + pc));
    if count == 0 {
        return Err(Error::Loss("no loss positions".into()));
    }
    Ok(total / count as f64)
}

pub struct Trainer {
    pub params: Parameters,
    pub state: OptimizerState,
    pub config: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub skipped: usize,
    train_set: Vec<TrainingSequence>,
    val_set: Vec<TrainingSequence>,
    orders: HashMap<usize, Vec<usize>>,
}

impl Trainer {
    pub fn new(params: Parameters, config: TrainConfig, corpus: &Corpus) -> Result<Self> {
        let state = OptimizerState::new(params.trainables());
        Self::assemble(params, state, config, 0, corpus)
    }

    pub fn from_checkpoint(ckpt: Checkpoint, corpus: &Corpus) -> Result<Self> {
        let Checkpoint {
            params,
            optimizer,
            train,
            step,
            ..
        } = ckpt;
        Self::assemble(params, optimizer, train, step, corpus)
    }

    fn assemble(
        params: Parameters,
        state: OptimizerState,
        config: TrainConfig,
        step: u64,
        corpus: &Corpus,
    ) -> Result<Self> {
        config.validate()?;
        params.check()?;
        if params.trainables().is_empty() {
            return Err(Error::Train("model has no trainable adapters".into()));
        }
        if corpus.is_empty() {
            return Err(Error::Train("training corpus is empty".into()));
        }
        let max_len = config.sequence_length.min(params.config.max_sequence_length);
        let (train_set, skipped) = prepare_sequences(corpus, max_len, config.answer_only_loss);
        if train_set.is_empty() {
            return Err(Error::Train(format!(
                "all {skipped} examples failed to pack into {max_len} tokens"
            )));
        }
        Ok(Trainer {
            params,
            state,
            config,
            step,
            skipped,
            train_set,
            val_set: Vec::new(),
            orders: HashMap::new(),
        })
    }

    /// Attach a validation corpus; its loss is computed at every epoch end.
    pub fn with_validation(mut self, corpus: &Corpus) -> Self {
        let max_len = self
            .config
            .sequence_length
            .min(self.params.config.max_sequence_length);
        self.val_set = prepare_sequences(corpus, max_len, self.config.answer_only_loss).0;
        self
    }

    pub fn train_set(&self) -> &[TrainingSequence] {
        &self.train_set
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train_set.len().div_ceil(self.config.minibatch_size)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.batches_per_epoch()
            .div_ceil(self.config.grad_accumulation_steps) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.steps_per_epoch() * self.config.epochs as u64;
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        let n = self.train_set.len();
        let seed = self.config.seed;
        self.orders.retain(|&e, _| e == epoch);
        self.orders.entry(epoch).or_insert_with(|| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seed::rng_for(seed, "train.shuffle", &[epoch as u64]));
            order
        })
    }

    /// Take one optimizer step.
    pub fn step_once(&mut self) -> Result<StepMetrics> {
        let spe = self.steps_per_epoch();
        let epoch = (self.step / spe) as usize;
        let within = (self.step % spe) as usize;
        let accum = self.config.grad_accumulation_steps;
        let mb = self.config.minibatch_size;
        let n_batches = self.batches_per_epoch();
        let n = self.train_set.len();
        let order = self.epoch_order(epoch).to_vec();

        let session = Session::new(&self.params)?;
        let step = self.step;
        let seed = self.config.seed;
        let first = within * accum;
        let last = ((within + 1) * accum).min(n_batches);
        let mut grads = LoraGrads::zeros_like(&self.params);
        let mut loss = 0.0;
        for b in first..last {
            let members = &order[b * mb..((b + 1) * mb).min(n)];
            let count: usize = members
                .iter()
                .map(|&i| self.train_set[i].target_mask().iter().filter(|&&m| m).count())
                .sum();
            let weight = 1.0 / count as f64;
            let parts: Vec<(f64, LoraGrads)> = members
                .par_iter()
                .map(|&i| {
                    let s = &self.train_set[i];
                    let dropout_seed = seed::derive_seed(seed, "train.dropout", &[step, i as u64]);
                    session
                        .weighted_grads(s.inputs(), s.targets(), s.target_mask(), Mode::Train, dropout_seed, weight)
                        .map(|(nll, _, g)| (nll, g))
                })
                .collect::<Result<_>>()?;
            for (nll, g) in &parts {
                loss += nll * weight;
                grads.add_assign(g);
            }
        }
        drop(session);
        let n_micro = (last - first) as f64;
        loss /= n_micro;
        grads.scale(1.0 / n_micro);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        if let Some(max_norm) = self.config.grad_clip {
            let norm = grads.global_norm();
            if norm > max_norm {
                grads.scale(max_norm / norm);
            }
        }

        let lr = self.config.lr_at(step + 1);
        let names = self.params.trainable_names();
        let mut trainables = self.params.trainables_mut();
        adamw_step(&mut trainables, &grads.tensors, &names, &mut self.state, &self.config, lr)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            epoch,
            loss,
            lr,
        })
    }

    /// End-of-epoch record, with validation loss when a validation set is
    /// attached.
    pub fn epoch_metrics(&self, epoch: usize) -> Result<EpochMetrics> {
        let validation_loss = if self.val_set.is_empty() {
            None
        } else {
            Some(mean_loss(&self.params, &self.val_set)?)
        };
        Ok(EpochMetrics {
            epoch,
            step: self.step,
            validation_loss,
        })
    }

    /// Train until the configured end (epochs or `max_steps`).
    pub fn run(&mut self, mut on_event: impl FnMut(TrainEvent<'_>)) -> Result<Vec<StepMetrics>> {
        let spe = self.steps_per_epoch();
        let mut log = Vec::new();
        while !self.is_done() {
            let m = self.step_once()?;
            on_event(TrainEvent::Step(&m));
            if self.step.is_multiple_of(spe) {
                let em = self.epoch_metrics(m.epoch)?;
                on_event(TrainEvent::EpochEnd(&em));
            }
            log.push(m);
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.params.config.clone(),
            train: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.state.clone(),
            step: self.step,
            rng: RngState {
                seed: self.config.seed,
                counter: self.step,
            },
        }
    }
}

/// Fine-tune `model` on `corpus` and return the trained parameters with the
/// per-step log.
pub fn train(
    corpus: &Corpus,
    model: Parameters,
    cfg: TrainConfig,
    on_event: impl FnMut(TrainEvent<'_>),
) -> Result<(Parameters, Vec<StepMetrics>)> {
    let mut trainer = Trainer::new(model, cfg, corpus)?;
    let log = trainer.run(on_event)?;
    Ok((trainer.params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Manifest, QARecord};
    use crate::model::{init_model, ModelConfig};

    fn corpus(n: usize) -> Corpus {
        Corpus {
            records: (0..n)
                .map(|i| QARecord::new("t", "", format!("Q{i}?"), format!("A{i}")))
                .collect(),
            manifest: Manifest::default(),
        }
    }

    fn small_model() -> Parameters {
        init_model(
            &ModelConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ff: 8,
                max_sequence_length: 32,
                lora_r: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn table_defaults() {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        assert_eq!(t.sequence_length, 1024);
        assert_eq!((m.lora_r, m.lora_alpha, m.lora_dropout), (64, 16.0, 0.1));
        assert_eq!(m.lora_target, crate::model::LoraTarget::AllLinear);
        assert_eq!((t.grad_accumulation_steps, t.minibatch_size, t.epochs), (1, 32, 5));
        assert_eq!((t.optimizer, t.lr_schedule), (OptimizerKind::AdamW, LrSchedule::Constant));
        assert_eq!(t.learning_rate, 2e-4);
    }

    #[test]
    fn step_counts() {
        let cfg = TrainConfig {
            minibatch_size: 4,
            sequence_length: 32,
            ..Default::default()
        };
        let mut tr = Trainer::new(small_model(), cfg.clone(), &corpus(10)).unwrap();
        assert_eq!(tr.batches_per_epoch(), 3);
        assert_eq!(tr.total_steps(), 15);
        let log = tr.run(|_| {}).unwrap();
        assert_eq!(log.len(), 15);
        assert!(log.iter().all(|m| m.lr == 2e-4));
        assert_eq!(tr.state.t, 15);

        let accum = TrainConfig {
            grad_accumulation_steps: 2,
            ..cfg
        };
        let tr = Trainer::new(small_model(), accum, &corpus(10)).unwrap();
        assert_eq!(tr.steps_per_epoch(), 2);
    }

    #[test]
    fn epoch_events_fire_once_per_epoch() {
        let cfg = TrainConfig {
            minibatch_size: 4,
            epochs: 3,
            sequence_length: 32,
            ..Default::default()
        };
        let mut tr = Trainer::new(small_model(), cfg, &corpus(8))
            .unwrap()
            .with_validation(&corpus(3));
        let mut epochs = Vec::new();
        tr.run(|e| {
            if let TrainEvent::EpochEnd(m) = e {
                epochs.push((m.epoch, m.validation_loss.is_some()));
            }
        })
        .unwrap();
        assert_eq!(epochs, [(0, true), (1, true), (2, true)]);
    }

    #[test]
    fn unpackable_corpus_is_an_error() {
        let long = Corpus {
            records: vec![QARecord::new("t", "x".repeat(100), "q", "a")],
            manifest: Manifest::default(),
        };
        let cfg = TrainConfig {
            sequence_length: 16,
            ..Default::default()
        };
        assert!(matches!(
            Trainer::new(small_model(), cfg, &long),
            Err(Error::Train(_))
        ));
    }

    #[test]
    fn invalid_learning_rate_rejected() {
        let cfg = TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
