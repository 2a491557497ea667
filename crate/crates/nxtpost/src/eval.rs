//! Offline evaluation: batch and KNN Hits@K, and the staleness,
//! temporal-decay and sweep experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nxtpost_core::metrics::{batch_hits_at_k, knn_hits_excluding, Corpus, Hits};
use nxtpost_core::model::UserModel;
use nxtpost_core::{ActionType, EmbeddingLookup, SequenceSample};

use crate::config::{EvalConfig, TrainConfig, Variant};
use crate::error::Result;
use crate::seed::{self, streams};
use crate::synth::{by_user, day_of, sample_from, InteractionEvent, Post, DAY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub k: usize,
    /// Exactly `hits / n_queries`.
    pub value: f64,
    pub hits: usize,
    pub n_queries: usize,
    /// Relative drop against the series' reference point, when meaningful.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_drop: Option<f64>,
    #[serde(default)]
    pub slices: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(metric: &str, k: usize, hits: Hits) -> Self {
        Self {
            metric: metric.into(),
            k,
            value: hits.value(),
            hits: hits.hits,
            n_queries: hits.n,
            relative_drop: None,
            slices: BTreeMap::new(),
        }
    }

    pub fn with_slice(mut self, key: &str, value: impl ToString) -> Self {
        self.slices.insert(key.into(), value.to_string());
        self
    }
}

/// Fills `relative_drop = (v₀ − v) / v₀` against the first report.
pub fn set_relative_drops(series: &mut [EvalReport]) {
    let Some(v0) = series.first().map(|r| r.value) else { return };
    for r in series {
        r.relative_drop = Some(if v0 > 0.0 { (v0 - r.value) / v0 } else { 0.0 });
    }
}

/// Aligned plain-text table of reports.
pub fn render_table(reports: &[EvalReport]) -> String {
    let slice_keys: Vec<String> = {
        let mut keys: Vec<String> = reports.iter().flat_map(|r| r.slices.keys().cloned()).collect();
        keys.sort();
        keys.dedup();
        keys
    };
    let mut header: Vec<String> = vec!["metric".into(), "k".into()];
    header.extend(slice_keys.iter().cloned());
    header.extend(["value", "hits", "n", "drop"].map(String::from));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.metric.clone(), r.k.to_string()];
            row.extend(slice_keys.iter().map(|k| r.slices.get(k).cloned().unwrap_or_default()));
            row.push(format!("{:.4}", r.value));
            row.push(r.hits.to_string());
            row.push(r.n_queries.to_string());
            row.push(r.relative_drop.map(|d| format!("{d:+.4}")).unwrap_or_default());
            row
        })
        .collect();
    let widths: Vec<usize> =
        (0..header.len()).map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

pub fn render_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("metric,k,value,hits,n_queries,relative_drop,slices\n");
    for r in reports {
        let slices: Vec<String> = r.slices.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.metric,
            r.k,
            r.value,
            r.hits,
            r.n_queries,
            r.relative_drop.map(|d| d.to_string()).unwrap_or_default(),
            slices.join(";")
        );
    }
    out
}

/// Eval-mode user vectors, computed in parallel.
pub fn user_vectors(model: &UserModel, samples: &[SequenceSample], embeddings: &(dyn EmbeddingLookup + Sync)) -> Result<Vec<Vec<f64>>> {
    Ok(samples.par_iter().map(|s| model.user_vector(s, embeddings)).collect::<nxtpost_core::Result<_>>()?)
}

/// Batch Hits@K for every `k`, pooled over `rounds` shuffled batchings of
/// full batches; row `i` pairs a user with its first long target.
pub fn batch_hits(
    model: &UserModel,
    samples: &[SequenceSample],
    embeddings: &(dyn EmbeddingLookup + Sync),
    b: usize,
    ks: &[usize],
    rounds: usize,
    seed: u64,
) -> Result<Vec<Hits>> {
    let samples: Vec<&SequenceSample> = samples.iter().filter(|s| !s.long_targets.is_empty()).collect();
    let owned: Vec<SequenceSample> = samples.iter().map(|s| (*s).clone()).collect();
    let users = user_vectors(model, &owned, embeddings)?;
    let posts: Vec<&[f64]> = samples
        .iter()
        .map(|s| embeddings.get(s.long_targets[0].post_id).ok_or(nxtpost_core::Error::MissingEmbedding(s.long_targets[0].post_id)))
        .collect::<nxtpost_core::Result<_>>()?;
    batch_hits_from_vectors(&users, &posts, b, ks, rounds, seed)
}

pub fn batch_hits_from_vectors(users: &[Vec<f64>], posts: &[&[f64]], b: usize, ks: &[usize], rounds: usize, seed: u64) -> Result<Vec<Hits>> {
    let mut out = vec![Hits::default(); ks.len()];
    let dim = posts.first().map_or(0, |p| p.len());
    for round in 0..rounds.max(1) {
        let mut order: Vec<usize> = (0..users.len()).collect();
        if round > 0 {
            order.shuffle(&mut seed::rng(seed, streams::EVAL, round as u64));
        }
        for chunk in order.chunks_exact(b) {
            let u: Vec<f64> = chunk.iter().flat_map(|&i| users[i].iter().copied()).collect();
            let p: Vec<f64> = chunk.iter().flat_map(|&i| posts[i].iter().copied()).collect();
            for (o, &k) in out.iter_mut().zip(ks) {
                if k >= b {
                    log::warn!("batch Hits@{k} with batch size {b} is trivially 1");
                }
                *o = o.merge(batch_hits_at_k(&u, &p, dim, k)?);
            }
        }
    }
    Ok(out)
}

/// Posts alive on `day`, not integrity-violating, with an embedding.
pub fn alive_corpus<'a>(posts: impl IntoIterator<Item = &'a Post>, embeddings: &dyn EmbeddingLookup, days: std::ops::Range<i64>) -> Corpus {
    let mut c = Corpus::new(embeddings.dim());
    let mut alive: Vec<&Post> = posts.into_iter().filter(|p| !p.integrity && days.clone().any(|d| p.alive_on(d))).collect();
    alive.sort_by_key(|p| p.post_id);
    for p in alive {
        if let Some(v) = embeddings.get(p.post_id) {
            c.insert(p.post_id, v).expect("embedding dimension matches corpus");
        }
    }
    c
}

/// Posts the user really engaged with in the sample's history; these are
/// not retrieval candidates for that user.
pub fn seen_posts(s: &SequenceSample) -> Vec<u64> {
    s.history.iter().filter(|h| h.action != ActionType::Backfill).map(|h| h.post_id).collect()
}

/// KNN Hits@K of each sample's user vector against all its long targets.
pub fn knn_hits(
    model: &UserModel,
    samples: &[SequenceSample],
    embeddings: &(dyn EmbeddingLookup + Sync),
    corpus: &Corpus,
    k: usize,
) -> Result<Hits> {
    let users = user_vectors(model, samples, embeddings)?;
    let targets: Vec<Vec<u64>> = samples.iter().map(|s| s.long_targets.iter().map(|t| t.post_id).collect()).collect();
    let seen: Vec<Vec<u64>> = samples.iter().map(seen_posts).collect();
    knn_from_vectors(&users, &targets, &seen, corpus, k)
}

/// KNN Hits@K with one query per `(sample, target)` pair, so every query
/// has a single relevant post.
pub fn knn_per_target(
    model: &UserModel,
    samples: &[SequenceSample],
    embeddings: &(dyn EmbeddingLookup + Sync),
    corpus: &Corpus,
    k: usize,
) -> Result<Hits> {
    let seen: Vec<Vec<u64>> = samples.iter().map(seen_posts).collect();
    knn_per_target_excluding(model, samples, &seen, embeddings, corpus, k)
}

/// As [`knn_per_target`] with explicit per-sample excluded posts.
pub fn knn_per_target_excluding(
    model: &UserModel,
    samples: &[SequenceSample],
    seen: &[Vec<u64>],
    embeddings: &(dyn EmbeddingLookup + Sync),
    corpus: &Corpus,
    k: usize,
) -> Result<Hits> {
    let users = user_vectors(model, samples, embeddings)?;
    let queries = users
        .iter()
        .zip(samples)
        .zip(seen)
        .flat_map(|((u, s), x)| s.long_targets.iter().map(move |t| (u.as_slice(), core::slice::from_ref(&t.post_id), x.as_slice())));
    Ok(knn_hits_excluding(queries, corpus, k)?)
}

pub fn knn_from_vectors(users: &[Vec<f64>], targets: &[Vec<u64>], seen: &[Vec<u64>], corpus: &Corpus, k: usize) -> Result<Hits> {
    let queries = users.iter().zip(targets).zip(seen).map(|((u, t), x)| (u.as_slice(), t.as_slice(), x.as_slice()));
    Ok(knn_hits_excluding(queries, corpus, k)?)
}

/// Standard evaluation of a trained model: batch Hits@K and KNN Hits@K over
/// posts alive during the holdout days.
pub fn evaluate(
    model: &UserModel,
    eval_samples: &[SequenceSample],
    embeddings: &(dyn EmbeddingLookup + Sync),
    posts: &[Post],
    holdout: std::ops::Range<i64>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    let hits = batch_hits(model, eval_samples, embeddings, cfg.batch_size, &cfg.batch_ks, cfg.batch_rounds, seed)?;
    for (&k, h) in cfg.batch_ks.iter().zip(hits) {
        reports.push(EvalReport::new("batch_hits", k, h).with_slice("batch_size", cfg.batch_size));
    }
    let corpus = alive_corpus(posts, embeddings, holdout);
    let users = user_vectors(model, eval_samples, embeddings)?;
    let targets: Vec<Vec<u64>> = eval_samples.iter().map(|s| s.long_targets.iter().map(|t| t.post_id).collect()).collect();
    let seen: Vec<Vec<u64>> = eval_samples.iter().map(seen_posts).collect();
    for &k in &cfg.knn_ks {
        let h = knn_from_vectors(&users, &targets, &seen, &corpus, k)?;
        reports.push(EvalReport::new("knn_hits", k, h).with_slice("corpus", corpus.len()));
    }
    Ok(reports)
}

/// Queries with history before `history_end` and targets on `target_day`,
/// embedded as of `history_end`.
fn day_queries(
    per_user: &BTreeMap<u64, Vec<InteractionEvent>>,
    history_end: i64,
    target_day: i64,
    l_max: usize,
) -> BTreeMap<u64, SequenceSample> {
    per_user
        .iter()
        .filter_map(|(&u, evs)| {
            let n = evs.partition_point(|e| e.timestamp < history_end);
            let future: Vec<InteractionEvent> = evs.iter().filter(|e| day_of(e.timestamp) == target_day).copied().collect();
            let mut s = sample_from(u, &evs[..n], &future, l_max, usize::MAX)?;
            s.cutoff_time = history_end;
            Some((u, s))
        })
        .collect()
}

/// KNN Hits@K on `eval_days` with user histories `d` days stale, for
/// `d = 0..=max_stale_days`. The query set is the same for every `d`.
pub fn staleness_experiment(
    model: &UserModel,
    events: &[InteractionEvent],
    embeddings: &(dyn EmbeddingLookup + Sync),
    posts: &[Post],
    eval_days: &[i64],
    max_stale_days: usize,
    k: usize,
) -> Result<Vec<EvalReport>> {
    let per_user = by_user(events);
    let l_max = model.l_max();
    let mut totals = vec![Hits::default(); max_stale_days + 1];
    for &day in eval_days {
        let corpus = alive_corpus(posts, embeddings, day..day + 1);
        let stalest = day_queries(&per_user, (day - max_stale_days as i64) * DAY, day, l_max);
        // Engagement filtering is up to date whatever the embedding age.
        let seen: Vec<Vec<u64>> = stalest
            .keys()
            .map(|u| per_user[u].iter().take_while(|e| e.timestamp < day * DAY).map(|e| e.post_id).collect())
            .collect();
        for (d, total) in totals.iter_mut().enumerate() {
            let queries = day_queries(&per_user, (day - d as i64) * DAY, day, l_max);
            let samples: Vec<SequenceSample> = stalest.keys().map(|u| queries[u].clone()).collect();
            *total = total.merge(knn_per_target_excluding(model, &samples, &seen, embeddings, &corpus, k)?);
        }
    }
    let mut series: Vec<EvalReport> =
        totals.into_iter().enumerate().map(|(d, h)| EvalReport::new("knn_hits", k, h).with_slice("staleness_days", d)).collect();
    set_relative_drops(&mut series);
    Ok(series)
}

/// KNN Hits@K on day `i` after each start day, `i = 1..=days`, with
/// histories frozen at the start day; hits are pooled over start days.
pub fn temporal_decay_series(
    model: &UserModel,
    events: &[InteractionEvent],
    embeddings: &(dyn EmbeddingLookup + Sync),
    posts: &[Post],
    t0_days: &[i64],
    days: usize,
    k: usize,
) -> Result<Vec<EvalReport>> {
    let per_user = by_user(events);
    let mut totals = vec![Hits::default(); days];
    for &t0 in t0_days {
        for (i, total) in totals.iter_mut().enumerate() {
            let day = t0 + i as i64;
            let corpus = alive_corpus(posts, embeddings, day..day + 1);
            let samples: Vec<SequenceSample> = day_queries(&per_user, t0 * DAY, day, model.l_max()).into_values().collect();
            *total = total.merge(knn_per_target(model, &samples, embeddings, &corpus, k)?);
        }
    }
    let mut series: Vec<EvalReport> =
        totals.into_iter().enumerate().map(|(i, h)| EvalReport::new("knn_hits", k, h).with_slice("day", i + 1)).collect();
    set_relative_drops(&mut series);
    Ok(series)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "kebab-case")]
pub enum SweepAxis {
    SeqLen,
    Layers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub report: EvalReport,
    pub secs_per_step: f64,
}

/// Trains the `ttt` variant at every value of `axis` and reports eval batch
/// Hits@1 with wall-clock per step.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    axis: SweepAxis,
    values: &[usize],
    base: &nxtpost_core::encoder::EncoderConfig,
    loss: &nxtpost_core::loss::LossConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    train_samples: &[SequenceSample],
    eval_samples: &[SequenceSample],
    embeddings: &(dyn EmbeddingLookup + Sync),
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for &v in values {
        let mut enc = base.clone();
        match axis {
            SweepAxis::SeqLen => enc.l_max = v,
            SweepAxis::Layers => enc.layers = v,
        }
        let tc = TrainConfig { variant: Variant::Ttt, eval_each_epoch: false, ..train_cfg.clone() };
        let (mut model, l) = crate::trainer::build_model(Variant::Ttt, &enc, loss, &tc, embeddings.dim())?;
        let start = Instant::now();
        let report = crate::trainer::train(&mut model, &l, train_samples, eval_samples, embeddings, &tc, eval_cfg)?;
        let secs = start.elapsed().as_secs_f64() / report.steps.max(1) as f64;
        let h = batch_hits(&model, eval_samples, embeddings, eval_cfg.batch_size, &[1], eval_cfg.batch_rounds, tc.seed)?[0];
        let axis_name = match axis {
            SweepAxis::SeqLen => "seq_len",
            SweepAxis::Layers => "layers",
        };
        out.push(SweepPoint { value: v, report: EvalReport::new("batch_hits", 1, h).with_slice(axis_name, v), secs_per_step: secs });
    }
    Ok(out)
}
