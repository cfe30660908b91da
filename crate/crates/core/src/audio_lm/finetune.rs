use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::AudioLm;
use super::scoring::{answer, encode_answer, loss_and_grads};
use crate::dsp::PatchSequence;
use crate::error::{Error, Result};
use crate::nn::{Grads, Optimizer, OptimizerKind};
use crate::tasks::McItem;

/// One training or evaluation example: audio patches and its question.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub patches: PatchSequence,
    pub item: McItem,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "OptimizerKind::adam")]
    pub optimizer: OptimizerKind,
    /// Cosine decay of the learning rate from `lr` to 0 over `steps`.
    #[serde(default)]
    pub cosine: bool,
}

impl FinetuneConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine || self.steps == 0 {
            return self.lr;
        }
        let t = (step as f64 / self.steps as f64).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            steps: 300,
            batch: 4,
            seed: 0,
            optimizer: OptimizerKind::adam(),
            cosine: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneState {
    pub model: AudioLm,
    pub optimizer: Optimizer,
    pub step: usize,
    pub curve: Vec<f64>,
}

impl FinetuneState {
    pub fn new(model: AudioLm, config: &FinetuneConfig) -> Self {
        Self {
            model,
            optimizer: Optimizer::new(config.optimizer, config.lr),
            step: 0,
            curve: Vec::new(),
        }
    }
}

fn batch_seed(seed: u64, step: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"lm-batch");
    h.update((step as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Steps the optimizer until `state.step == until`, supervising only the
/// gold answer span. Only trainable tensors move. On a non-finite loss the
/// state is left at the last good step and a divergence error is returned.
pub fn continue_finetune(
    data: &[LmExample],
    config: &FinetuneConfig,
    state: &mut FinetuneState,
    until: usize,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty finetuning set".into()));
    }
    if state.model.lora.is_none() {
        return Err(Error::NoAdapters);
    }
    if config.batch == 0 {
        return Err(Error::InvalidInput("batch must be positive".into()));
    }
    let weight = 1.0 / config.batch as f64;
    while state.step < until {
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(config.seed, state.step));
        let mut total = Grads::default();
        let mut loss = 0.0;
        for _ in 0..config.batch {
            let ex = data.choose(&mut rng).expect("non-empty");
            let (tokens, mask) = encode_answer(&state.model, &ex.item, ex.item.gold_index);
            let (l, g) = loss_and_grads(&state.model, &ex.patches, &tokens, &mask, true)?;
            loss += l * weight;
            total.accumulate(g.expect("requested"), weight);
        }
        if !loss.is_finite() || !total.is_finite() {
            return Err(Error::Divergence {
                step: state.step,
                loss,
            });
        }
        state.optimizer.lr = config.lr_at(state.step);
        state.optimizer.apply(&mut state.model.params, &total);
        state.curve.push(loss);
        state.step += 1;
    }
    Ok(())
}

pub fn finetune(model: AudioLm, data: &[LmExample], config: &FinetuneConfig) -> Result<FinetuneState> {
    let mut state = FinetuneState::new(model, config);
    continue_finetune(data, config, &mut state, config.steps)?;
    Ok(state)
}

/// Fraction of examples whose predicted option is the gold one.
pub fn answer_accuracy(model: &AudioLm, data: &[LmExample]) -> Result<f64> {
    let mut hits = 0;
    for ex in data {
        if answer(model, &ex.patches, &ex.item)? == ex.item.gold_index {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}
