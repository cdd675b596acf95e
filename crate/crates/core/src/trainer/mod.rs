//! Contrastive fine-tuning loop.

mod loss;
mod optim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use loss::{
    global_gather, global_gather_value, hard_negative_loss, hard_negative_loss_value, in_batch_loss,
    in_batch_loss_value,
};
pub use optim::{scheduled_lr, AdamW, AdamWConfig};

use crate::checkpoint::Checkpoint;
use crate::data::{make_batches, BatchEncoder, TemplateRegistry, TokenBatch, Tokenizer, TrainingBatch, TrainingExample};
use crate::error::{Error, Result};
use crate::model::{is_trainable, Model, ModelVars};
use crate::tensor::{Tape, Var};

/// Dataset tags starting with this prefix use `code_edit_weight`.
pub const CODE_EDIT_PREFIX: &str = "CodeEditSearch";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub tau: f64,
    pub k_hard: usize,
    pub world_size: usize,
    #[serde(default)]
    pub loss_weights: BTreeMap<String, f64>,
    pub code_edit_weight: f64,
    pub seed: u64,
    pub warmup_fraction: f64,
    pub drop_last: bool,
    /// Number of evenly spaced checkpoints kept per run.
    pub checkpoints: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 3,
            batch_size: 16,
            max_len: 128,
            tau: 0.05,
            k_hard: 7,
            world_size: 1,
            loss_weights: BTreeMap::new(),
            code_edit_weight: 1.0,
            seed: 0,
            warmup_fraction: 0.03,
            drop_last: false,
            checkpoints: 4,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("train.tau", "must be positive"));
        }
        if self.world_size == 0 {
            return Err(Error::config("train.world_size", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2"));
        }
        if self.batch_size < self.world_size {
            return Err(Error::config("train.batch_size", "must be at least world_size"));
        }
        if self.max_len < 2 {
            return Err(Error::config("train.max_len", "must be at least 2"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("train.warmup_fraction", "must lie in [0, 1]"));
        }
        if self.checkpoints == 0 {
            return Err(Error::config("train.checkpoints", "must be at least 1"));
        }
        for (name, w) in &self.loss_weights {
            if !(*w >= 0.0) || !w.is_finite() {
                return Err(Error::config("train.loss_weights", format!("weight for {name} must be finite and non-negative")));
            }
        }
        if !(self.code_edit_weight >= 0.0) || !self.code_edit_weight.is_finite() {
            return Err(Error::config("train.code_edit_weight", "must be finite and non-negative"));
        }
        self.optimizer.validate()
    }

    /// An explicit entry wins; otherwise code-edit datasets get
    /// `code_edit_weight` and everything else 1.
    pub fn weight_for(&self, dataset: &str) -> f64 {
        if let Some(w) = self.loss_weights.get(dataset) {
            *w
        } else if dataset.starts_with(CODE_EDIT_PREFIX) {
            self.code_edit_weight
        } else {
            1.0
        }
    }
}

/// Rows `[start, end)` of a left-padded batch as owned sequences.
fn shard(batch: &TokenBatch, start: usize, end: usize) -> Vec<(Vec<usize>, Vec<bool>)> {
    (start..end)
        .map(|i| {
            let (t, m) = batch.row(i);
            (t.to_vec(), m.to_vec())
        })
        .collect()
}

fn embed_rows(tape: &mut Tape, vars: &ModelVars, rows: &[(Vec<usize>, Vec<bool>)]) -> Result<Var> {
    let embs = rows
        .iter()
        .map(|(t, m)| vars.embed(tape, t, m))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&embs)
}

/// Weighted objective of one batch, simulating `world_size` ranks: each rank
/// embeds its contiguous shard, shards are gathered before the in-batch
/// loss, and each query's hard-negative loss uses only its own negatives.
pub fn step_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &TrainingBatch,
    tau: f64,
    world_size: usize,
    weight: f64,
) -> Result<Var> {
    let b = batch.len();
    if world_size == 0 || b == 0 || !b.is_multiple_of(world_size) {
        return Err(Error::Contract(format!(
            "batch of {b} cannot be split evenly across {world_size} ranks"
        )));
    }
    let per = b / world_size;
    let mut q_blocks = Vec::with_capacity(world_size);
    let mut d_blocks = Vec::with_capacity(world_size);
    for r in 0..world_size {
        q_blocks.push(embed_rows(tape, vars, &shard(&batch.queries, r * per, (r + 1) * per))?);
        d_blocks.push(embed_rows(tape, vars, &shard(&batch.positives, r * per, (r + 1) * per))?);
    }
    let q = global_gather(tape, &q_blocks)?;
    let d = global_gather(tape, &d_blocks)?;
    let in_batch = in_batch_loss(tape, q, d, tau)?;

    let mut total = in_batch;
    if !batch.negative_owner.is_empty() {
        let negs = embed_rows(tape, vars, &shard(&batch.negatives, 0, batch.negatives.len()))?;
        let mut hn_sum = None;
        for i in 0..b {
            let start = batch.negative_owner.partition_point(|&o| o < i);
            let end = batch.negative_owner.partition_point(|&o| o <= i);
            let qi = tape.slice_rows(q, i, i + 1)?;
            let di = tape.slice_rows(d, i, i + 1)?;
            let ni = if end > start { Some(tape.slice_rows(negs, start, end)?) } else { None };
            let l = hard_negative_loss(tape, qi, di, ni, tau)?;
            hn_sum = Some(match hn_sum {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let hn_mean = tape.scale(hn_sum.expect("non-empty batch"), 1.0 / b as f64);
        total = tape.add(total, hn_mean)?;
    }
    Ok(tape.scale(total, weight))
}

/// Loss and gradients of the trainable parameters for one batch.
pub fn loss_and_grads(
    model: &Model,
    batch: &TrainingBatch,
    tau: f64,
    world_size: usize,
    weight: f64,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, is_trainable)?;
    let loss = step_loss(&mut tape, &vars, batch, tau, world_size, weight)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, var) in vars.binding.iter() {
        if let Some(g) = grads.take(var) {
            out.insert(name.to_owned(), g);
        }
    }
    Ok((value, out))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub dataset: String,
    pub language: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoints: Vec<Checkpoint>,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// 1-based steps at which the `n` checkpoints of a `total`-step run are taken.
pub fn checkpoint_steps(total: usize, n: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (1..=n).map(|i| (total * i).div_ceil(n)).filter(|&s| s > 0).collect();
    steps.dedup();
    steps
}

/// Trains `model` in place on `examples`. `log` receives one entry per step.
pub fn train(
    examples: &[TrainingExample],
    mut model: Model,
    config: &RunConfig,
    templates: Option<&TemplateRegistry>,
    config_hash: &str,
    mut log: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Contract("no training examples".into()));
    }
    for ex in examples {
        ex.validate()?;
    }
    let encoder = BatchEncoder {
        tokenizer: Tokenizer::new(config.max_len.min(model.config.backbone.max_len))?,
        templates,
        k_hard: config.k_hard,
    };
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut batches = make_batches(examples, &encoder, config.batch_size, config.seed.wrapping_add(epoch as u64), config.drop_last)?;
        // Every rank must hold the same number of rows; drop the remainder.
        for b in &mut batches {
            let keep = b.len() - b.len() % config.world_size;
            if keep < b.len() {
                truncate_batch(b, keep);
            }
        }
        batches.retain(|b| b.len() >= 2.max(config.world_size));
        epochs.push(batches);
    }
    let total: usize = epochs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Contract("no batch has at least two examples".into()));
    }
    let warmup = (config.warmup_fraction * total as f64).ceil() as usize;
    let ckpt_steps = checkpoint_steps(total, config.checkpoints);
    let mut opt = AdamW::new(config.optimizer);
    let mut checkpoints = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for batches in &epochs {
        let mut sum = 0.0;
        for batch in batches {
            step += 1;
            let weight = config.weight_for(&batch.group_key.dataset);
            let (loss, grads) = loss_and_grads(&model, batch, config.tau, config.world_size, weight)?;
            if !loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {loss} on {}", batch.group_key),
                });
            }
            let lr = scheduled_lr(config.learning_rate, step, warmup);
            opt.step(&mut model.params, &grads, lr)?;
            sum += loss;
            log(&StepLog {
                step,
                dataset: batch.group_key.dataset.clone(),
                language: batch.group_key.language.clone(),
                loss,
                lr,
            });
            if ckpt_steps.contains(&step) {
                checkpoints.push(Checkpoint::from_model(&model, step, config_hash, config.seed));
            }
        }
        epoch_losses.push(if batches.is_empty() { f64::NAN } else { sum / batches.len() as f64 });
    }
    Ok(TrainOutcome {
        model,
        checkpoints,
        epoch_losses,
        steps: step,
    })
}

fn truncate_batch(batch: &mut TrainingBatch, keep: usize) {
    let group = batch.group_key.clone();
    let rows = |tb: &TokenBatch, n: usize| -> Vec<Vec<usize>> {
        (0..n)
            .map(|i| {
                let (t, m) = tb.row(i);
                t.iter().zip(m).filter(|(_, &m)| m).map(|(&t, _)| t).collect()
            })
            .collect()
    };
    let n_neg = batch.negative_owner.partition_point(|&o| o < keep);
    batch.queries = TokenBatch::left_padded(rows(&batch.queries, keep), group.clone());
    batch.positives = TokenBatch::left_padded(rows(&batch.positives, keep), group.clone());
    batch.negatives = TokenBatch::left_padded(rows(&batch.negatives, n_neg), group);
    batch.negative_owner.truncate(n_neg);
    batch.example_indices.truncate(keep);
}
