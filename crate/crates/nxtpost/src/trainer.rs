//! Batch assembly, the optimization loop and the ablation-ladder variants.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nxtpost_core::baseline::AvgBaseline;
use nxtpost_core::encoder::{EncoderConfig, ModelParams};
use nxtpost_core::loss::{sample_negatives, LossConfig, NegativeMode, NegativePool};
use nxtpost_core::model::{SampleLoss, SampleObjective, TermSpec, UserModel};
use nxtpost_core::optim::{clip_global_norm, Adam};
use nxtpost_core::params::round_to_f32;
use nxtpost_core::{EmbeddingLookup, SequenceSample};

use crate::config::{EvalConfig, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::batch_hits;
use crate::seed::{self, streams};

/// Samples per parallel work unit; fixed so reductions are reproducible.
const CHUNK: usize = 4;

/// Builds the untrained user model and loss settings of a variant.
pub fn build_model(
    variant: Variant,
    base: &EncoderConfig,
    loss: &LossConfig,
    train: &TrainConfig,
    d_emb: usize,
) -> Result<(UserModel, LossConfig)> {
    let (mut enc, loss) = variant.resolve(base, loss);
    enc.d_emb = d_emb;
    enc.dropout = train.dropout;
    loss.validate()?;
    let mut rng = seed::rng(train.seed, streams::INIT, 0);
    let model = match variant {
        Variant::BaselineAvg => UserModel::Average(AvgBaseline::new(d_emb, train.baseline_hidden, enc.l_max, &mut rng)),
        _ => UserModel::Transformer(ModelParams::new(enc, &mut rng)?),
    };
    Ok((model, loss))
}

/// Groups shuffled sample indices into batches of `b` samples with distinct
/// users. The shuffle depends only on `(seed, epoch)`; incomplete batches
/// are dropped.
pub fn assemble_batches(samples: &[SequenceSample], b: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::rng(seed, streams::SHUFFLE, epoch as u64));
    let mut pending: Vec<(Vec<usize>, BTreeSet<u64>)> = Vec::new();
    let mut out = Vec::new();
    for i in order {
        let user = samples[i].user_id;
        let slot = match pending.iter().position(|(_, users)| !users.contains(&user)) {
            Some(s) => s,
            None => {
                pending.push((Vec::with_capacity(b), BTreeSet::new()));
                pending.len() - 1
            }
        };
        pending[slot].0.push(i);
        pending[slot].1.insert(user);
        if pending[slot].0.len() == b {
            out.push(pending.remove(slot).0);
        }
    }
    let dropped: usize = pending.iter().map(|(v, _)| v.len()).sum();
    if dropped > 0 {
        log::debug!("epoch {epoch}: dropped {dropped} samples in partial batches");
    }
    out
}

/// Per-sample negatives for one batch, filtered by ownership.
pub struct PreparedBatch<'a> {
    pub samples: Vec<&'a SequenceSample>,
    pub short_negatives: Vec<Vec<f64>>,
    pub long_negatives: Vec<Vec<f64>>,
    pub short_terms: usize,
    pub long_terms: usize,
}

fn pool_negatives(
    pool: &NegativePool,
    samples: &[&SequenceSample],
    mode: NegativeMode,
    seed: u64,
    step: usize,
    salt: u64,
) -> Vec<Vec<f64>> {
    let none = BTreeSet::new();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut idx = pool.negatives_for(s.user_id, &none);
            if let NegativeMode::Sampled(k) = mode {
                let mut rng = seed::rng(seed, streams::NEGATIVES, ((step as u64) << 20) ^ (salt << 16) ^ i as u64);
                if k > idx.len() {
                    log::debug!("sampled negatives: k={k} exceeds pool of {}", idx.len());
                }
                idx = sample_negatives(&idx, k, &mut rng);
            }
            pool.gather(&idx)
        })
        .collect()
}

/// Builds the short- and long-term negative pools of a batch.
pub fn prepare_batch<'a>(
    model: &UserModel,
    samples: Vec<&'a SequenceSample>,
    embeddings: &dyn EmbeddingLookup,
    loss: &LossConfig,
    seed: u64,
    step: usize,
) -> Result<PreparedBatch<'a>> {
    let de = embeddings.dim();
    let lookup = |id: u64| embeddings.get(id).ok_or(nxtpost_core::Error::MissingEmbedding(id));
    let l_max = model.l_max();
    let mut short_pool = NegativePool::new(de);
    let mut long_pool = NegativePool::new(de);
    let mut short_terms = 0;
    let mut long_terms = 0;
    for s in &samples {
        let start = s.history.len().saturating_sub(l_max);
        for h in &s.history[start..] {
            short_pool.push(s.user_id, h.post_id, lookup(h.post_id)?);
        }
        for t in s.long_targets.iter().take(loss.horizon) {
            long_pool.push(s.user_id, t.post_id, lookup(t.post_id)?);
        }
        short_terms += model.short_term_count(s);
        long_terms += s.long_targets.len().min(loss.horizon);
    }
    let use_short = loss.w_short > 0.0 && short_terms > 0;
    let use_long = loss.w_long > 0.0 && long_terms > 0;
    if samples.len() < 2 {
        log::warn!("batch of one user: no negatives, loss is zero");
    }
    let short_negatives = if use_short { pool_negatives(&short_pool, &samples, loss.negatives, seed, step, 1) } else { Vec::new() };
    let long_negatives = if use_long { pool_negatives(&long_pool, &samples, loss.negatives, seed, step, 2) } else { Vec::new() };
    Ok(PreparedBatch {
        samples,
        short_negatives,
        long_negatives,
        short_terms: if use_short { short_terms } else { 0 },
        long_terms: if use_long { long_terms } else { 0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub short_loss: f64,
    pub long_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm after clipping.
    pub clipped_norm: f64,
}

/// Mean-reduced batch objective and, when `grads` is given, its gradient.
/// Dropout is active when `train_seed` is given.
pub fn batch_objective(
    model: &UserModel,
    batch: &PreparedBatch<'_>,
    embeddings: &(dyn EmbeddingLookup + Sync),
    loss: &LossConfig,
    grads: Option<&mut [f64]>,
    train_seed: Option<(u64, usize)>,
) -> Result<(f64, f64, f64)> {
    let ws = if batch.short_terms > 0 { loss.w_short / batch.short_terms as f64 } else { 0.0 };
    let wl = if batch.long_terms > 0 { loss.w_long / batch.long_terms as f64 } else { 0.0 };
    let n = model.values().len();
    let want_grad = grads.is_some();
    let idx: Vec<usize> = (0..batch.samples.len()).collect();
    let parts: Vec<(Option<Vec<f64>>, SampleLoss)> = idx
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<(Option<Vec<f64>>, SampleLoss)> {
            let mut g = want_grad.then(|| vec![0.0; n]);
            let mut acc = SampleLoss::default();
            for &i in chunk {
                let obj = SampleObjective {
                    scale: loss.scale,
                    horizon: loss.horizon,
                    short: (batch.short_terms > 0).then(|| TermSpec { weight: ws, negatives: &batch.short_negatives[i] }),
                    long: (batch.long_terms > 0).then(|| TermSpec { weight: wl, negatives: &batch.long_negatives[i] }),
                };
                let mut rng = train_seed.map(|(s, step)| seed::rng(s, streams::DROPOUT, ((step as u64) << 20) | i as u64));
                let r = rng.as_mut().map(|r| r as &mut dyn RngCore);
                let l = model.loss_and_grad(batch.samples[i], embeddings, &obj, g.as_deref_mut(), r)?;
                acc.add(&l);
            }
            Ok((g, acc))
        })
        .collect::<Result<_>>()?;
    let mut total = SampleLoss::default();
    if let Some(out) = grads {
        for (g, l) in &parts {
            total.add(l);
            if let Some(g) = g {
                for (o, v) in out.iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
    } else {
        parts.iter().for_each(|(_, l)| total.add(l));
    }
    let short = if total.short_terms > 0 { total.short_sum / total.short_terms as f64 } else { 0.0 };
    let long = if total.long_terms > 0 { total.long_sum / total.long_terms as f64 } else { 0.0 };
    let s_w = if batch.short_terms > 0 { loss.w_short } else { 0.0 };
    let l_w = if batch.long_terms > 0 { loss.w_long } else { 0.0 };
    Ok((s_w * short + l_w * long, short, long))
}

/// One optimizer step: forward in train mode, clip, Adam, round to f32.
pub fn train_step(
    model: &mut UserModel,
    adam: &mut Adam,
    batch: &PreparedBatch<'_>,
    embeddings: &(dyn EmbeddingLookup + Sync),
    train: &TrainConfig,
    loss: &LossConfig,
    step: usize,
) -> Result<StepMetrics> {
    let mut grads = vec![0.0; model.values().len()];
    let dropout = (train.dropout > 0.0).then_some((train.seed, step));
    let (total, short, long) = batch_objective(model, batch, embeddings, loss, Some(&mut grads), dropout)?;
    if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { step, users: batch.samples.iter().map(|s| s.user_id).collect() });
    }
    let grad_norm = clip_global_norm(&mut grads, train.grad_clip);
    let clipped_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    let values = model.values_mut();
    adam.step(values, &grads);
    round_to_f32(values);
    Ok(StepMetrics { loss: total, short_loss: short, long_loss: long, grad_norm, clipped_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Eval batch Hits@K keyed by `"hits@K"`.
    pub batch_hits: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub epochs: Vec<EpochReport>,
    /// Eval batch Hits@K of the final model.
    pub final_hits: BTreeMap<String, f64>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
    pub notes: Vec<String>,
}

/// Trains `model` on `train_samples`, evaluating batch Hits on
/// `eval_samples` after every epoch when configured.
pub fn train(
    model: &mut UserModel,
    loss: &LossConfig,
    train_samples: &[SequenceSample],
    eval_samples: &[SequenceSample],
    embeddings: &(dyn EmbeddingLookup + Sync),
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut adam = Adam::new(model.values().len(), cfg.learning_rate);
    let mut losses = Vec::new();
    let mut grad_norms = Vec::new();
    let mut epochs = Vec::new();
    let hits_map = |m: &UserModel| -> Result<BTreeMap<String, f64>> {
        let hits = batch_hits(m, eval_samples, embeddings, eval.batch_size, &eval.batch_ks, eval.batch_rounds, cfg.seed)?;
        Ok(eval.batch_ks.iter().zip(hits).map(|(k, h)| (format!("hits@{k}"), h.value())).collect())
    };
    for epoch in 0..cfg.epochs {
        let batches = assemble_batches(train_samples, cfg.batch_size, cfg.seed, epoch);
        if batches.is_empty() {
            return Err(Error::NotEnoughData(format!("{} training samples for batch size {}", train_samples.len(), cfg.batch_size)));
        }
        let first = losses.len();
        for b in batches {
            let step = losses.len();
            let prepared = prepare_batch(model, b.iter().map(|&i| &train_samples[i]).collect(), embeddings, loss, cfg.seed, step)?;
            let m = train_step(model, &mut adam, &prepared, embeddings, cfg, loss, step)?;
            losses.push(m.loss);
            grad_norms.push(m.grad_norm);
        }
        let mean_loss = losses[first..].iter().sum::<f64>() / (losses.len() - first) as f64;
        let batch_hits = if cfg.eval_each_epoch && !eval_samples.is_empty() { hits_map(model)? } else { BTreeMap::new() };
        log::info!("{} epoch {epoch}: loss {mean_loss:.4} {batch_hits:?}", cfg.variant);
        epochs.push(EpochReport { epoch, mean_loss, batch_hits });
    }
    let final_hits = if eval_samples.is_empty() { BTreeMap::new() } else { hits_map(model)? };
    let mut notes = Vec::new();
    if cfg.variant == Variant::BaselineAvg {
        notes.push("baseline_avg: averaged post embeddings through a two-layer map stand in for an ID-feature wide-and-deep baseline".into());
    }
    Ok(TrainReport {
        variant: cfg.variant,
        steps: losses.len(),
        losses,
        grad_norms,
        epochs,
        final_hits,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoint: None,
        notes,
    })
}
