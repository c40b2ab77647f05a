//! Mini-batch training with deterministic gradient accumulation.
//!
//! Each batch is split into a fixed number of index chunks. Every chunk runs
//! one packed forward, per-sequence loss gradients, and one packed backward;
//! chunk gradients are then combined in chunk order. Because the split is by
//! index and never by thread, serial and parallel runs produce bitwise
//! identical parameters.

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::{distill_loss_grad, LabelArchive, LossSpec};
use crate::markov::SequenceDataset;
use crate::model::backward::backward_chunk;
use crate::model::forward::forward_chunk;
use crate::model::{adam_step_with_lr, GradBuf, ModelConfig, ModelParams, OptimizerState};
use crate::rng;

/// Index chunks per batch. Fixed so the accumulation order never depends on
/// thread count.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Fraction of total steps spent in linear warmup before cosine decay.
    pub warmup_frac: f64,
    /// Snapshot parameters every this many optimizer steps.
    pub checkpoint_every: Option<u64>,
    pub parallel: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 1,
            batch_size: 64,
            base_lr: 3e-4,
            warmup_frac: 0.01,
            checkpoint_every: None,
            parallel: false,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(self.warmup_frac.is_finite() && (0.0..1.0).contains(&self.warmup_frac)) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_frac
            )));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step as seen by the learning-curve tables.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub samples_seen: u64,
    pub lr: f64,
    /// Mean per-sequence loss of the batch, before the step.
    pub loss: f64,
}

/// Parameter snapshot taken mid-training.
#[derive(Debug, Clone)]
pub struct TrainedCheckpoint {
    pub step: u64,
    pub samples_seen: u64,
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<StepRecord>,
    pub checkpoints: Vec<TrainedCheckpoint>,
}

/// Learning rate at a zero-based step: linear warmup to `base_lr`, then
/// cosine decay toward zero over the remaining steps.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64, warmup_frac: f64) -> f64 {
    let warm = (warmup_frac * total_steps as f64).ceil() as u64;
    if step < warm {
        return base_lr * (step + 1) as f64 / warm as f64;
    }
    let span = (total_steps - warm).max(1);
    let t = (step - warm) as f64 / span as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Trains a fresh model on the dataset under the given objective.
///
/// Initialization draws from `config.seed`; epoch shuffles draw from
/// `(seed, "shuffle", epoch)`. Label fields, when the objective needs them,
/// are aligned with the dataset by sequence index.
pub fn train(
    config: &ModelConfig,
    dataset: &SequenceDataset,
    spec: &LossSpec,
    labels: Option<&LabelArchive>,
    options: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome> {
    options.validate()?;
    spec.validate()?;
    dataset.validate()?;
    if dataset.k != config.vocab_size {
        return Err(Error::VocabMismatch { expected: config.vocab_size, got: dataset.k });
    }
    if dataset.seq_len > config.max_seq_len {
        return Err(Error::Config(format!(
            "sequences of length {} exceed max_seq_len {}",
            dataset.seq_len, config.max_seq_len
        )));
    }
    let labels = if spec.alpha > 0.0 {
        let archive = labels.ok_or(Error::MissingSoftLabels)?;
        if archive.fields.len() != dataset.len() {
            return Err(Error::LabelCache(format!(
                "{} label fields for {} sequences",
                archive.fields.len(),
                dataset.len()
            )));
        }
        Some(archive)
    } else {
        None
    };

    let mut params = ModelParams::init(config)?;
    let mut opt = OptimizerState::new(params.data.len(), options.base_lr);
    let n = dataset.len();
    let batches_per_epoch = n.div_ceil(options.batch_size);
    let total_steps = (options.epochs * batches_per_epoch) as u64;
    let mut trace = Vec::with_capacity(total_steps as usize);
    let mut checkpoints = Vec::new();
    let mut step = 0u64;
    let mut samples_seen = 0u64;

    for epoch in 0..options.epochs {
        let order = rng::shuffled_indices(seed, "shuffle", epoch as u64, n);
        for batch in order.chunks(options.batch_size) {
            let jobs: Vec<&[usize]> = batch.chunks(batch.len().div_ceil(GRAD_CHUNKS)).collect();
            let results: Vec<Result<(GradBuf, f64)>> = if options.parallel {
                jobs.par_iter()
                    .map(|job| chunk_grad(&params, dataset, spec, labels, job))
                    .collect()
            } else {
                jobs.iter()
                    .map(|job| chunk_grad(&params, dataset, spec, labels, job))
                    .collect()
            };
            let mut grad = GradBuf::zeros_like(&params);
            let mut loss_sum = 0.0;
            for r in results {
                let (g, l) = r?;
                grad.add_assign(&g);
                loss_sum += l;
            }
            grad.scale(1.0 / batch.len() as f64);
            if let Some(tensor) = grad.first_non_finite() {
                return Err(Error::NonFiniteGradient { tensor: tensor.to_string() });
            }

            let lr = lr_at(step, total_steps, options.base_lr, options.warmup_frac);
            adam_step_with_lr(&mut params, &grad, &mut opt, lr)?;
            step += 1;
            samples_seen += batch.len() as u64;
            trace.push(StepRecord {
                step,
                samples_seen,
                lr,
                loss: loss_sum / batch.len() as f64,
            });
            if options.checkpoint_every.is_some_and(|every| step % every == 0) && step < total_steps
            {
                checkpoints.push(TrainedCheckpoint {
                    step,
                    samples_seen,
                    params: params.clone(),
                });
            }
        }
    }
    Ok(TrainOutcome { params, trace, checkpoints })
}

/// Packed forward, per-sequence loss gradients, packed backward for one
/// index chunk. Returns the summed (not averaged) gradient and loss.
fn chunk_grad(
    params: &ModelParams,
    dataset: &SequenceDataset,
    spec: &LossSpec,
    labels: Option<&LabelArchive>,
    idxs: &[usize],
) -> Result<(GradBuf, f64)> {
    let l = dataset.seq_len;
    let mut packed = Vec::with_capacity(idxs.len() * l);
    for &i in idxs {
        packed.extend_from_slice(dataset.sequence(i));
    }
    let (logits, cache) = forward_chunk(params, &packed, idxs.len(), true)?;
    let cache = cache.expect("cache requested");
    let mut dlogits = Array2::zeros((idxs.len() * l, params.config.vocab_size));
    let mut loss_sum = 0.0;
    for (pos, &i) in idxs.iter().enumerate() {
        let rows = logits.slice(s![pos * l..(pos + 1) * l, ..]);
        let field = labels.map(|a| &a.fields[i]);
        let (breakdown, g) = distill_loss_grad(rows, dataset.sequence(i), field, spec)?;
        loss_sum += breakdown.total;
        dlogits.slice_mut(s![pos * l..(pos + 1) * l, ..]).assign(&g);
    }
    let grad = backward_chunk(params, &cache, &dlogits)?;
    Ok((grad, loss_sum))
}
