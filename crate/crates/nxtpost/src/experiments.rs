//! End-to-end experiment pipelines shared by the CLI and the test suites.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use nxtpost_core::model::UserModel;
use nxtpost_core::{ActionType, SequenceSample};

use crate::coldstart::{popular_backfill, similar_user_backfill, with_backfill, BackfillMode, Popularity, UserSimilarity};
use crate::config::{PostEncoderMode, RunConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::{alive_corpus, evaluate, knn_per_target, staleness_experiment, temporal_decay_series, EvalReport};
use crate::post_encoder::{co_engagement_pairs, train_post_tower, PostEmbeddings, PostEncoder, PostTowerReport};
use crate::synth::{by_user, filter_events, generate_world, measure_survival, split_samples, InteractionEvent, World, DAY};
use crate::trainer::{build_model, train, TrainReport};

/// A world with its post embeddings and the filtered event stream.
pub struct Prepared {
    pub cfg: RunConfig,
    pub seed: u64,
    pub world: World,
    pub encoder: PostEncoder,
    pub embeddings: PostEmbeddings,
    pub tower_report: Option<PostTowerReport>,
    /// Events left after integrity and minimum-interaction filtering.
    pub events: Vec<InteractionEvent>,
}

/// The configured post encoder for `world`, training the tower if needed.
pub fn make_post_encoder(cfg: &RunConfig, world: &World, seed: u64) -> Result<(PostEncoder, Option<PostTowerReport>)> {
    let pe = &cfg.post_encoder;
    match pe.mode {
        PostEncoderMode::Oracle => Ok((PostEncoder::Oracle { sigma: pe.sigma, seed }, None)),
        PostEncoderMode::Trained => {
            let split = train_split(cfg);
            let train_events: Vec<InteractionEvent> = world.events.iter().filter(|e| e.timestamp < split).copied().collect();
            let pairs = co_engagement_pairs(&train_events, pe.pair_window_days, pe.max_pairs, seed);
            let (tower, report) = train_post_tower(&world.post_index(), &pairs, &cfg.dataset, pe, seed)?;
            Ok((PostEncoder::Trained { tower, languages: cfg.dataset.languages, countries: cfg.dataset.countries }, Some(report)))
        }
    }
}

/// Start of the holdout period.
pub fn train_split(cfg: &RunConfig) -> i64 {
    (cfg.dataset.days as i64 - cfg.samples.holdout_days as i64) * DAY
}

impl Prepared {
    pub fn generate(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let world = generate_world(&cfg.dataset, seed)?;
        Self::from_world(cfg, seed, world)
    }

    pub fn from_world(cfg: &RunConfig, seed: u64, world: World) -> Result<Self> {
        let (encoder, tower_report) = make_post_encoder(cfg, &world, seed)?;
        let dim = encoder.dim(cfg.dataset.topic_dim);
        let embeddings = encoder.encode_all(&world.posts, dim, 1)?;
        Self::with_embeddings(cfg, seed, world, encoder, embeddings, tower_report)
    }

    pub fn with_embeddings(
        cfg: &RunConfig,
        seed: u64,
        world: World,
        encoder: PostEncoder,
        embeddings: PostEmbeddings,
        tower_report: Option<PostTowerReport>,
    ) -> Result<Self> {
        let integrity: BTreeMap<u64, bool> = world.posts.iter().map(|p| (p.post_id, p.integrity)).collect();
        let flagged = |id: u64| integrity.get(&id).copied().unwrap_or(false);
        let events: Vec<InteractionEvent> = filter_events(&world.events, &flagged, cfg.samples.min_interactions, cfg.samples.drop_integrity)
            .into_iter()
            .filter(|e| embeddings.vectors.contains_key(&e.post_id))
            .collect();
        Ok(Self { cfg: cfg.clone(), seed, world, encoder, embeddings, tower_report, events })
    }

    pub fn d_emb(&self) -> usize {
        self.embeddings.dim
    }

    pub fn holdout(&self) -> Range<i64> {
        let days = self.cfg.dataset.days as i64;
        days - self.cfg.samples.holdout_days as i64..days
    }

    /// Train and eval samples split at `split_ts`.
    pub fn samples_at(&self, split_ts: i64) -> (Vec<SequenceSample>, Vec<SequenceSample>) {
        let s = &self.cfg.samples;
        split_samples(&self.events, self.cfg.encoder.l_max, s.horizon, split_ts, s.stride, s.max_train_per_user)
    }

    pub fn samples(&self) -> (Vec<SequenceSample>, Vec<SequenceSample>) {
        self.samples_at(train_split(&self.cfg))
    }

    /// Builds and trains `variant` on `train_samples`.
    pub fn train_variant(
        &self,
        variant: Variant,
        train_samples: &[SequenceSample],
        eval_samples: &[SequenceSample],
    ) -> Result<(UserModel, TrainReport)> {
        let tc = crate::config::TrainConfig { variant, ..self.cfg.train.clone() };
        let (mut model, loss) = build_model(variant, &self.cfg.encoder, &self.cfg.loss, &tc, self.d_emb())?;
        let report = train(&mut model, &loss, train_samples, eval_samples, &self.embeddings, &tc, &self.cfg.eval)?;
        Ok((model, report))
    }

    pub fn evaluate(&self, model: &UserModel, eval_samples: &[SequenceSample]) -> Result<Vec<EvalReport>> {
        evaluate(model, eval_samples, &self.embeddings, &self.world.posts, self.holdout(), &self.cfg.eval, self.cfg.train.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub variant: Variant,
    pub reports: Vec<EvalReport>,
    pub train: TrainReport,
}

impl LadderRow {
    pub fn metric(&self, metric: &str, k: usize) -> Option<f64> {
        self.reports.iter().find(|r| r.metric == metric && r.k == k).map(|r| r.value)
    }
}

/// Trains and evaluates every variant on the same samples.
pub fn ladder(p: &Prepared, variants: &[Variant]) -> Result<Vec<LadderRow>> {
    Ok(ladder_models(p, variants)?.into_iter().map(|(row, _)| row).collect())
}

/// As [`ladder`], keeping the trained models.
pub fn ladder_models(p: &Prepared, variants: &[Variant]) -> Result<Vec<(LadderRow, UserModel)>> {
    let (train_samples, eval_samples) = p.samples();
    variants
        .iter()
        .map(|&v| {
            let (model, train) = p.train_variant(v, &train_samples, &eval_samples)?;
            let reports = p.evaluate(&model, &eval_samples)?.into_iter().map(|r| r.with_slice("variant", v)).collect();
            Ok((LadderRow { variant: v, reports, train }, model))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayResult {
    pub t0_day: i64,
    pub with_long: Vec<EvalReport>,
    pub without_long: Vec<EvalReport>,
}

impl DecayResult {
    /// Relative drop of the last day versus the first.
    pub fn final_drops(&self) -> (f64, f64) {
        let last = |s: &[EvalReport]| s.last().and_then(|r| r.relative_drop).unwrap_or(0.0);
        (last(&self.with_long), last(&self.without_long))
    }
}

/// Trains a model with and without the long-term loss on targets from the
/// `decay_train_days` before the first start day and tracks KNN Hits@K over the following days with
/// histories frozen at each start day.
pub fn temporal_decay(p: &Prepared, k: usize) -> Result<DecayResult> {
    let e = &p.cfg.eval;
    let starts = e.decay_starts.max(1) as i64;
    let t0 = p.cfg.dataset.days as i64 - e.decay_days as i64 - starts + 1;
    if t0 <= 1 {
        return Err(Error::NotEnoughData(format!("{} days leave no training period before the decay window", p.cfg.dataset.days)));
    }
    let (mut train_samples, _) = p.samples_at(t0 * DAY);
    let window_start = (t0 - e.decay_train_days.max(1) as i64) * DAY;
    train_samples.retain(|s| s.cutoff_time >= window_start);
    let t0_days: Vec<i64> = (t0..t0 + starts).collect();
    let series = |v: Variant| -> Result<Vec<EvalReport>> {
        let (model, _) = p.train_variant(v, &train_samples, &[])?;
        let s = temporal_decay_series(&model, &p.events, &p.embeddings, &p.world.posts, &t0_days, e.decay_days, k)?;
        Ok(s.into_iter().map(|r| r.with_slice("variant", v)).collect())
    };
    Ok(DecayResult { t0_day: t0, with_long: series(Variant::TttCausalLongShort)?, without_long: series(Variant::CausalShort)? })
}

/// Staleness series of a `ttt_causal_long` model trained on targets before
/// the first eval day.
pub fn staleness(p: &Prepared, k: usize) -> Result<Vec<EvalReport>> {
    let e = &p.cfg.eval;
    let days = p.cfg.dataset.days as i64;
    let first = days - e.stale_eval_days.max(1) as i64;
    if first - (e.max_stale_days as i64) < 1 {
        return Err(Error::NotEnoughData(format!("{days} days are too few for {} stale days", e.max_stale_days)));
    }
    let (train_samples, _) = p.samples_at(first * DAY);
    let (model, _) = p.train_variant(Variant::TttCausalLong, &train_samples, &[])?;
    let eval_days: Vec<i64> = (first..days).collect();
    staleness_experiment(&model, &p.events, &p.embeddings, &p.world.posts, &eval_days, e.max_stale_days, k)
}

/// The configuration of the zero-drift control world.
pub fn control_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.dataset.drift_rate = 0.0;
    c.dataset.session_stickiness = 1.0;
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartRow {
    pub mode: BackfillMode,
    pub report: EvalReport,
}

/// Eval samples reduced to `u mod 3` real events per user, with the removed
/// events also withheld from the backfill window.
pub fn cold_slice(eval_samples: &[SequenceSample]) -> (Vec<SequenceSample>, BTreeMap<u64, i64>) {
    let mut kept_from = BTreeMap::new();
    let slice = eval_samples
        .iter()
        .map(|s| {
            let keep = (s.user_id % 3) as usize;
            let mut c = s.clone();
            c.history.drain(..c.history.len().saturating_sub(keep));
            // Events of this user before this time are withheld.
            kept_from.insert(s.user_id, c.history.first().map_or(s.cutoff_time, |h| h.timestamp));
            c
        })
        .collect();
    (slice, kept_from)
}

/// KNN Hits@K on the cold slice under each backfill mode, all with one
/// `ttt_causal_long` model.
pub fn cold_start(p: &Prepared, modes: &[BackfillMode], k: usize) -> Result<Vec<ColdStartRow>> {
    let (train_samples, eval_samples) = p.samples();
    let (model, _) = p.train_variant(Variant::TttCausalLong, &train_samples, &[])?;
    cold_start_with(p, &model, &eval_samples, modes, k)
}

pub fn cold_start_with(p: &Prepared, model: &UserModel, eval_samples: &[SequenceSample], modes: &[BackfillMode], k: usize) -> Result<Vec<ColdStartRow>> {
    let policy = &p.cfg.backfill;
    policy.validate(model.l_max())?;
    let split = train_split(&p.cfg);
    let (slice, kept_from) = cold_slice(eval_samples);
    let window_start = split - policy.window_days as i64 * DAY;
    let window: Vec<InteractionEvent> = p
        .events
        .iter()
        .filter(|e| e.timestamp >= window_start && e.timestamp < split)
        .filter(|e| kept_from.get(&e.user_id).is_none_or(|&t| e.timestamp >= t))
        .copied()
        .collect();
    let posts = p.world.post_index();
    let popularity = Popularity::build(&window, &posts);
    let similarity = UserSimilarity::build(&window);
    let window_by_user = by_user(&window);
    let profiles: BTreeMap<u64, (u32, u32)> = p.world.users.iter().map(|u| (u.user_id, (u.lang, u.country))).collect();
    let corpus = alive_corpus(&p.world.posts, &p.embeddings, p.holdout());
    let mut rows = Vec::new();
    for &mode in modes {
        let samples: Vec<SequenceSample> = slice
            .iter()
            .map(|s| {
                let (lang, country) = profiles.get(&s.user_id).copied().unwrap_or((0, 0));
                let fill = match mode {
                    BackfillMode::None => Vec::new(),
                    BackfillMode::Popular => popular_backfill(lang, country, &s.history, &popularity, policy, s.cutoff_time),
                    BackfillMode::SimilarUser => similar_user_backfill(
                        s.user_id,
                        lang,
                        country,
                        &s.history,
                        &similarity,
                        &window_by_user,
                        &popularity,
                        policy,
                        s.cutoff_time,
                    ),
                };
                with_backfill(s, fill)
            })
            .collect();
        let h = knn_per_target(model, &samples, &p.embeddings, &corpus, k)?;
        let name = serde_json::to_value(mode)?.as_str().unwrap_or_default().to_owned();
        rows.push(ColdStartRow { mode, report: EvalReport::new("knn_hits", k, h).with_slice("backfill", name) });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityReport {
    pub target_week1: f64,
    pub target_week2: f64,
    pub week1: f64,
    pub week2: f64,
}

pub fn volatility(world: &World, cfg: &RunConfig) -> VolatilityReport {
    let (week1, week2) = measure_survival(&world.events, cfg.dataset.days);
    VolatilityReport { target_week1: cfg.dataset.week1, target_week2: cfg.dataset.week2, week1, week2 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRow {
    pub action: ActionType,
    pub mean_next_cosine: f64,
    pub events: usize,
}

pub fn action_rows(p: &Prepared) -> Result<Vec<ActionRow>> {
    Ok(crate::synth::action_predictiveness(&p.events, &p.embeddings)?
        .into_iter()
        .map(|(action, mean_next_cosine, events)| ActionRow { action, mean_next_cosine, events })
        .collect())
}
