//! Synthetic engagement world and sample construction.
//!
//! Posts are drawn around topic clusters and live for a calibrated number of
//! days. Each alive post receives a Poisson number of engagements per day;
//! every engagement picks an action, then a user with probability
//! proportional to `activity · exp(s · cos(focus_u(day), topic))`, where `s`
//! depends on how strongly the action follows interest. Users focus on one of
//! their interest components per day and the components drift slowly.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, LogNormal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nxtpost_core::linalg::{cosine, dot, normalize};
use nxtpost_core::{ActionType, EmbeddingLookup, HistoryEvent, SequenceSample, Surface, TargetEvent};

use crate::config::{DatasetConfig, SampleConfig};
use crate::error::{config, Result};
use crate::seed::{self, streams};

pub const DAY: i64 = 86_400;

pub fn day_of(ts: i64) -> i64 {
    ts.div_euclid(DAY)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: u64,
    /// Day index of creation.
    pub created_at: i64,
    pub lifetime_days: u32,
    pub lang: u32,
    pub country: u32,
    /// Integrity-violating content.
    pub integrity: bool,
    pub topic: Vec<f64>,
    pub text_channel: Vec<f64>,
    pub image_channels: Vec<Vec<f64>>,
}

impl Post {
    pub fn alive_on(&self, day: i64) -> bool {
        day >= self.created_at && day < self.created_at + i64::from(self.lifetime_days)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u64,
    pub lang: u32,
    pub country: u32,
    /// Unit interest components at day 0.
    pub components: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub activity_rate: f64,
    pub drift_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: u64,
    pub post_id: u64,
    pub action: ActionType,
    pub surface: Surface,
    #[serde(rename = "ts")]
    pub timestamp: i64,
}

impl InteractionEvent {
    pub fn history_event(&self) -> HistoryEvent {
        HistoryEvent { post_id: self.post_id, action: self.action, surface: self.surface, timestamp: self.timestamp }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct World {
    pub posts: Vec<Post>,
    pub users: Vec<UserProfile>,
    /// Sorted by `(user_id, timestamp)`.
    pub events: Vec<InteractionEvent>,
}

impl World {
    pub fn post_index(&self) -> BTreeMap<u64, &Post> {
        self.posts.iter().map(|p| (p.post_id, p)).collect()
    }
}

/// Longest lifetime of the short-lived component.
pub const SHORT_LIFETIME_DAYS: usize = 3;

/// Mixture lifetime model: with probability `1 − long_weight` a post lives
/// uniformly 1..=3 days, otherwise `1 + j` days with `P(j) ∝ rho^j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifetimeModel {
    pub long_weight: f64,
    pub rho: f64,
    pub max_days: usize,
}

impl LifetimeModel {
    pub fn pmf(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.max_days + 1];
        let short = SHORT_LIFETIME_DAYS.min(self.max_days);
        for l in 1..=short {
            p[l] += (1.0 - self.long_weight) / short as f64;
        }
        let norm: f64 = (0..self.max_days).map(|j| self.rho.powi(j as i32)).sum();
        for j in 0..self.max_days {
            p[1 + j] += self.long_weight * self.rho.powi(j as i32) / norm;
        }
        p
    }

    pub fn sample<R: Rng + ?Sized>(&self, cdf: &[f64], rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        cdf.partition_point(|&c| c < u).clamp(1, self.max_days) as u32
    }
}

/// Weeks whose follow-up weeks `w+1` and `w+2` both lie inside the world.
fn measured_weeks(days: usize) -> std::ops::Range<i64> {
    0..(days as i64 / 7 - 2).max(0)
}

/// Expected pooled survival `(week1, week2)` for posts created uniformly over
/// `days` days, each engaged on an alive day with probability `1 − e^{−λ}`.
pub fn expected_survival(model: &LifetimeModel, rate: f64, days: usize) -> (f64, f64) {
    let q = 1.0 - (-rate).exp();
    let pmf = model.pmf();
    let weeks = measured_weeks(days);
    let (mut base, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for c in 0..days as i64 {
        for (l, &p) in pmf.iter().enumerate().skip(1) {
            if p == 0.0 {
                continue;
            }
            let end = (c + l as i64).min(days as i64);
            let engaged = |w: i64| {
                let n = (end.min(7 * w + 7) - c.max(7 * w)).max(0);
                1.0 - (1.0 - q).powi(n as i32)
            };
            for w in weeks.clone() {
                let e0 = engaged(w);
                base += p * e0;
                s1 += p * e0 * engaged(w + 1);
                s2 += p * e0 * engaged(w + 2);
            }
        }
    }
    if base == 0.0 {
        (0.0, 0.0)
    } else {
        (s1 / base, s2 / base)
    }
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solves for the lifetime mixture hitting the configured survival targets.
pub fn calibrate_lifetimes(cfg: &DatasetConfig) -> Result<LifetimeModel> {
    let max_days = cfg.max_lifetime_days;
    if measured_weeks(cfg.days).is_empty() {
        // Too short to measure; any reasonable model will do.
        return Ok(LifetimeModel { long_weight: 0.5, rho: 0.85, max_days });
    }
    let at = |a: f64, rho: f64| expected_survival(&LifetimeModel { long_weight: a, rho, max_days }, cfg.engagement_rate, cfg.days);
    // For fixed rho, week1 increases with the long-lived share.
    let weight_for = |rho: f64| -> Option<f64> {
        if at(1.0, rho).0 < cfg.week1 || at(0.0, rho).0 > cfg.week1 {
            return None;
        }
        Some(bisect(0.0, 1.0, |a| at(a, rho).0 - cfg.week1))
    };
    let rho = bisect(0.01, 0.999, |rho| match weight_for(rho) {
        Some(a) => at(a, rho).1 - cfg.week2,
        None => -1.0,
    });
    let long_weight = weight_for(rho).ok_or_else(|| config("survival targets unattainable with this engagement rate"))?;
    let model = LifetimeModel { long_weight, rho, max_days };
    let (w1, w2) = at(long_weight, rho);
    if (w1 - cfg.week1).abs() > 1e-3 || (w2 - cfg.week2).abs() > 1e-3 {
        return Err(config(format!("survival targets unattainable: best fit ({w1:.3}, {w2:.3})")));
    }
    Ok(model)
}

/// Pooled week-over-week survival measured from an event stream: of the
/// posts engaged in week `w`, the fraction engaged again in weeks `w+1`
/// and `w+2`.
pub fn measure_survival(events: &[InteractionEvent], days: usize) -> (f64, f64) {
    let mut weeks: BTreeMap<u64, BTreeSet<i64>> = BTreeMap::new();
    for e in events {
        weeks.entry(e.post_id).or_default().insert(day_of(e.timestamp).div_euclid(7));
    }
    let (mut base, mut s1, mut s2) = (0usize, 0usize, 0usize);
    for w in measured_weeks(days) {
        for set in weeks.values() {
            if set.contains(&w) {
                base += 1;
                s1 += usize::from(set.contains(&(w + 1)));
                s2 += usize::from(set.contains(&(w + 2)));
            }
        }
    }
    if base == 0 {
        return (0.0, 0.0);
    }
    (s1 as f64 / base as f64, s2 as f64 / base as f64)
}

fn gaussian_vec<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(n, 1.0, rng);
        if normalize(&mut v) > 1e-9 {
            return v;
        }
    }
}

/// `normalize(center + spread · g / √T)`.
fn around<R: Rng + ?Sized>(center: &[f64], spread: f64, rng: &mut R) -> Vec<f64> {
    let t = center.len();
    loop {
        let mut v = gaussian_vec(t, spread / (t as f64).sqrt(), rng);
        for (x, c) in v.iter_mut().zip(center) {
            *x += c;
        }
        if normalize(&mut v) > 1e-9 {
            return v;
        }
    }
}

fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Rotates `v` toward `target` by at most `angle` radians; returns true when
/// the target was reached.
fn rotate_toward(v: &mut [f64], target: &[f64], angle: f64) -> bool {
    let c = dot(v, target).clamp(-1.0, 1.0);
    let between = c.acos();
    if between <= angle {
        v.copy_from_slice(target);
        return true;
    }
    let mut perp: Vec<f64> = target.iter().zip(v.iter()).map(|(t, x)| t - c * x).collect();
    normalize(&mut perp);
    let (s, co) = angle.sin_cos();
    for (x, p) in v.iter_mut().zip(&perp) {
        *x = co * *x + s * *p;
    }
    normalize(v);
    false
}

struct Clusters {
    centers: Vec<Vec<f64>>,
    text_map: Vec<f64>,
    image_map: Vec<f64>,
}

impl Clusters {
    fn new(cfg: &DatasetConfig, master: u64) -> Self {
        let mut rng = seed::rng(master, streams::CLUSTERS, 0);
        let centers = (0..cfg.clusters).map(|_| unit_vec(cfg.topic_dim, &mut rng)).collect();
        let n = cfg.channel_dim * cfg.topic_dim;
        let text_map = gaussian_vec(n, 1.0, &mut rng);
        let image_map = gaussian_vec(n, 1.0, &mut rng);
        Self { centers, text_map, image_map }
    }

    fn attrs(&self, cfg: &DatasetConfig, cluster: usize) -> (u32, u32) {
        ((cluster % cfg.languages) as u32, ((cluster / cfg.languages) % cfg.countries) as u32)
    }

    fn project(map: &[f64], topic: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        map.chunks_exact(topic.len()).map(|row| dot(row, topic) + noise * rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

fn draw_attrs(cfg: &DatasetConfig, clusters: &Clusters, cluster: usize, rng: &mut ChaCha8Rng) -> (u32, u32) {
    let (l, c) = clusters.attrs(cfg, cluster);
    let lang = if rng.random::<f64>() < cfg.attr_match { l } else { rng.random_range(0..cfg.languages as u32) };
    let country = if rng.random::<f64>() < cfg.attr_match { c } else { rng.random_range(0..cfg.countries as u32) };
    (lang, country)
}

fn make_post(cfg: &DatasetConfig, clusters: &Clusters, life: &LifetimeModel, cdf: &[f64], master: u64, id: u64, day: i64) -> Post {
    let mut rng = seed::rng(master, streams::POSTS, id);
    let k = rng.random_range(0..cfg.clusters);
    let topic = around(&clusters.centers[k], cfg.cluster_spread, &mut rng);
    let (lang, country) = draw_attrs(cfg, clusters, k, &mut rng);
    let text_channel = Clusters::project(&clusters.text_map, &topic, cfg.text_noise, &mut rng);
    let n_img = rng.random_range(0..=cfg.max_images);
    let image_channels = (0..n_img).map(|_| Clusters::project(&clusters.image_map, &topic, cfg.image_noise, &mut rng)).collect();
    let lifetime_days = life.sample(cdf, &mut rng);
    let integrity = rng.random::<f64>() < cfg.integrity_rate;
    Post { post_id: id, created_at: day, lifetime_days, lang, country, integrity, topic, text_channel, image_channels }
}

/// A user's profile plus the unit focus vector for every day.
fn make_user(cfg: &DatasetConfig, clusters: &Clusters, master: u64, id: u64) -> (UserProfile, Vec<f64>) {
    let mut rng = seed::rng(master, streams::USERS, id);
    let n = rng.random_range(1..=cfg.max_components);
    let ks: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.clusters)).collect();
    let components: Vec<Vec<f64>> = ks.iter().map(|&k| around(&clusters.centers[k], cfg.cluster_spread, &mut rng)).collect();
    let mut weights: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1) + 1e-12).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let primary = (0..n).max_by(|&a, &b| weights[a].total_cmp(&weights[b])).unwrap_or(0);
    let (lang, country) = draw_attrs(cfg, clusters, ks[primary], &mut rng);
    let activity_rate = if cfg.activity_mean == 0.0 {
        0.0
    } else {
        let s = cfg.activity_sigma;
        cfg.activity_mean * LogNormal::new(-0.5 * s * s, s).expect("valid lognormal").sample(&mut rng)
    };

    let t = cfg.topic_dim;
    let mut comps = components.clone();
    let mut targets: Vec<Vec<f64>> =
        (0..n).map(|_| around(&clusters.centers[rng.random_range(0..cfg.clusters)], cfg.cluster_spread, &mut rng)).collect();
    let mut focus = Vec::with_capacity(cfg.days * t);
    let mut current = categorical(&weights, &mut rng);
    let mut transient: Option<Vec<f64>> = None;
    for day in 0..cfg.days {
        if day > 0 && rng.random::<f64>() >= cfg.session_stickiness {
            current = categorical(&weights, &mut rng);
            transient = (cfg.transient_rate > 0.0 && rng.random::<f64>() < cfg.transient_rate)
                .then(|| around(&clusters.centers[rng.random_range(0..cfg.clusters)], cfg.cluster_spread, &mut rng));
        }
        focus.extend_from_slice(transient.as_ref().unwrap_or(&comps[current]));
        if cfg.drift_rate > 0.0 {
            for (c, target) in comps.iter_mut().zip(targets.iter_mut()) {
                if rotate_toward(c, target, cfg.drift_rate) {
                    *target = around(&clusters.centers[rng.random_range(0..cfg.clusters)], cfg.cluster_spread, &mut rng);
                }
            }
        }
    }
    let profile = UserProfile { user_id: id, lang, country, components, weights, activity_rate, drift_rate: cfg.drift_rate };
    (profile, focus)
}

fn cumulative(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn draw_cumulative(cum: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total = *cum.last()?;
    if !(total > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    Some(cum.partition_point(|&c| c <= u).min(cum.len() - 1))
}

/// Engagements of one post over its whole life.
fn engage_post(
    cfg: &DatasetConfig,
    post: &Post,
    users: &[UserProfile],
    focus: &[Vec<f64>],
    master: u64,
) -> Vec<InteractionEvent> {
    let mut rng = seed::rng(master, streams::ENGAGE, post.post_id);
    let mut out = Vec::new();
    let end = (post.created_at + i64::from(post.lifetime_days)).min(cfg.days as i64);
    if cfg.engagement_rate <= 0.0 {
        return out;
    }
    let poisson = Poisson::new(cfg.engagement_rate).expect("positive rate");
    let action_w: Vec<f64> = cfg.actions.iter().map(|a| a.weight).collect();
    let t = cfg.topic_dim;
    let mut engaged: HashSet<usize> = HashSet::new();
    let mut cos = vec![0.0; users.len()];
    for day in post.created_at..end {
        let n = poisson.sample(&mut rng) as usize;
        if n == 0 {
            continue;
        }
        let d = day as usize;
        for (u, c) in cos.iter_mut().enumerate() {
            *c = dot(&focus[u][d * t..(d + 1) * t], &post.topic);
        }
        let mut tables: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for _ in 0..n {
            let signal = &cfg.actions[categorical(&action_w, &mut rng)];
            let s = cfg.affinity_scale * signal.affinity_factor;
            let cum = tables.entry(s.to_bits()).or_insert_with(|| {
                cumulative(users.iter().zip(&cos).map(|(u, &c)| if u.activity_rate > 0.0 { u.activity_rate * (s * (c - 1.0)).exp() } else { 0.0 }))
            });
            let mut pick = None;
            for _ in 0..64 {
                match draw_cumulative(cum, &mut rng) {
                    Some(u) if !engaged.contains(&u) => {
                        pick = Some(u);
                        break;
                    }
                    Some(_) => continue,
                    None => break,
                }
            }
            let surface = Surface::ALL[categorical(&cfg.surface_weights, &mut rng)];
            let offset = rng.random_range(0..DAY);
            if let Some(u) = pick {
                engaged.insert(u);
                out.push(InteractionEvent {
                    user_id: users[u].user_id,
                    post_id: post.post_id,
                    action: signal.action,
                    surface,
                    timestamp: day * DAY + offset,
                });
            }
        }
    }
    out
}

/// Deterministic synthetic world for `(cfg, seed)`.
pub fn generate_world(cfg: &DatasetConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let clusters = Clusters::new(cfg, seed);
    let life = calibrate_lifetimes(cfg)?;
    let cdf = cumulative(life.pmf().into_iter());

    let ppd = cfg.posts_per_day as u64;
    let posts: Vec<Post> = (0..cfg.days as u64 * ppd)
        .into_par_iter()
        .map(|i| make_post(cfg, &clusters, &life, &cdf, seed, i + 1, (i / ppd) as i64))
        .collect();
    let (users, focus): (Vec<UserProfile>, Vec<Vec<f64>>) =
        (0..cfg.users as u64).into_par_iter().map(|u| make_user(cfg, &clusters, seed, u + 1)).unzip();

    let mut events: Vec<InteractionEvent> =
        posts.par_iter().flat_map_iter(|p| engage_post(cfg, p, &users, &focus, seed)).collect();
    events.sort_unstable_by_key(|e| (e.user_id, e.timestamp, e.post_id));
    make_timestamps_unique(&mut events);
    Ok(World { posts, users, events })
}

/// Moves colliding timestamps of one user to the next free second of the
/// same day. Input must be sorted by user; output is re-sorted.
fn make_timestamps_unique(events: &mut [InteractionEvent]) {
    let mut start = 0;
    while start < events.len() {
        let user = events[start].user_id;
        let end = start + events[start..].iter().take_while(|e| e.user_id == user).count();
        let mut used: HashSet<i64> = HashSet::new();
        for e in &mut events[start..end] {
            let day = day_of(e.timestamp);
            let mut off = e.timestamp - day * DAY;
            while used.contains(&(day * DAY + off)) {
                off = (off + 1) % DAY;
            }
            e.timestamp = day * DAY + off;
            used.insert(e.timestamp);
        }
        events[start..end].sort_unstable_by_key(|e| (e.timestamp, e.post_id));
        start = end;
    }
}

/// Removes events on posts with fewer than `min_interactions` events and,
/// when `drop_integrity`, events on integrity-violating posts.
pub fn filter_events(
    events: &[InteractionEvent],
    integrity: &dyn Fn(u64) -> bool,
    min_interactions: usize,
    drop_integrity: bool,
) -> Vec<InteractionEvent> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for e in events {
        *counts.entry(e.post_id).or_default() += 1;
    }
    events
        .iter()
        .filter(|e| counts[&e.post_id] >= min_interactions && !(drop_integrity && integrity(e.post_id)))
        .copied()
        .collect()
}

/// Groups events by user, each group sorted by time.
pub fn by_user(events: &[InteractionEvent]) -> BTreeMap<u64, Vec<InteractionEvent>> {
    let mut out: BTreeMap<u64, Vec<InteractionEvent>> = BTreeMap::new();
    for e in events {
        out.entry(e.user_id).or_default().push(*e);
    }
    for v in out.values_mut() {
        v.sort_by_key(|e| (e.timestamp, e.post_id));
    }
    out
}

/// Sample whose history is the last `l_max` of `history` and whose targets
/// are the first `horizon` of `future` not already in the history.
pub fn sample_from(user_id: u64, history: &[InteractionEvent], future: &[InteractionEvent], l_max: usize, horizon: usize) -> Option<SequenceSample> {
    let start = history.len().saturating_sub(l_max);
    let history: Vec<HistoryEvent> = history[start..].iter().map(InteractionEvent::history_event).collect();
    if history.is_empty() {
        return None;
    }
    let seen: BTreeSet<u64> = history.iter().map(|h| h.post_id).collect();
    let mut taken = BTreeSet::new();
    let long_targets: Vec<TargetEvent> = future
        .iter()
        .filter(|e| !seen.contains(&e.post_id) && taken.insert(e.post_id))
        .take(horizon)
        .map(|e| TargetEvent { post_id: e.post_id, timestamp: e.timestamp })
        .collect();
    let cutoff_time = long_targets.first()?.timestamp;
    Some(SequenceSample { user_id, history, long_targets, cutoff_time })
}

/// Splits every user's stream at `split_ts`. The eval sample uses all events
/// before the split as history and the first `horizon` events after it as
/// targets. Training samples cut the pre-split events every `stride` events,
/// newest first, at most `max_per_user` per user.
pub fn split_samples(
    events: &[InteractionEvent],
    l_max: usize,
    horizon: usize,
    split_ts: i64,
    stride: usize,
    max_per_user: usize,
) -> (Vec<SequenceSample>, Vec<SequenceSample>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (user, evs) in by_user(events) {
        let n_pre = evs.partition_point(|e| e.timestamp < split_ts);
        let (pre, post) = evs.split_at(n_pre);
        if let Some(s) = sample_from(user, pre, post, l_max, horizon) {
            eval.push(s);
        }
        let mut j = n_pre.saturating_sub(1);
        let mut taken = 0;
        while j >= 1 && taken < max_per_user {
            if let Some(s) = sample_from(user, &pre[..j], &pre[j..], l_max, horizon) {
                train.push(s);
                taken += 1;
            }
            if j < stride.max(1) {
                break;
            }
            j -= stride.max(1);
        }
    }
    (train, eval)
}

/// Leakage-free train/eval samples: eval targets come from the final
/// `holdout_days` days of a `days`-day world.
pub fn build_samples(events: &[InteractionEvent], l_max: usize, cfg: &SampleConfig, days: usize) -> (Vec<SequenceSample>, Vec<SequenceSample>) {
    let split = (days as i64 - cfg.holdout_days as i64) * DAY;
    split_samples(events, l_max, cfg.horizon, split, cfg.stride, cfg.max_train_per_user)
}

/// Mean cosine between each event's post and the same user's next engaged
/// post, per action of the earlier event. Actions with no successor events
/// are omitted.
pub fn action_predictiveness(events: &[InteractionEvent], embeddings: &dyn EmbeddingLookup) -> Result<Vec<(ActionType, f64, usize)>> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for evs in by_user(events).values() {
        for w in evs.windows(2) {
            let a = embeddings.get(w[0].post_id).ok_or(nxtpost_core::Error::MissingEmbedding(w[0].post_id))?;
            let b = embeddings.get(w[1].post_id).ok_or(nxtpost_core::Error::MissingEmbedding(w[1].post_id))?;
            let e = acc.entry(w[0].action.index()).or_default();
            e.0 += cosine(a, b);
            e.1 += 1;
        }
    }
    Ok(ActionType::OBSERVED
        .iter()
        .filter_map(|&a| acc.get(&a.index()).map(|&(s, n)| (a, s / n as f64, n)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: u64, post: u64, ts: i64) -> InteractionEvent {
        InteractionEvent { user_id: user, post_id: post, action: ActionType::Like, surface: Surface::Feed, timestamp: ts }
    }

    #[test]
    fn windowing_example() {
        let events: Vec<_> = (1..=5).map(|t| ev(1, 100 + t as u64, t)).collect();
        let (_, eval) = split_samples(&events, 3, 2, 4, 1, 10);
        assert_eq!(eval.len(), 1);
        let ts: Vec<i64> = eval[0].history.iter().map(|h| h.timestamp).collect();
        assert_eq!(ts, vec![1, 2, 3]);
        let tt: Vec<i64> = eval[0].long_targets.iter().map(|t| t.timestamp).collect();
        assert_eq!(tt, vec![4, 5]);
    }

    #[test]
    fn single_event_user_has_no_samples() {
        let (train, eval) = split_samples(&[ev(1, 1, 10)], 3, 2, 5, 1, 10);
        assert!(train.is_empty() && eval.is_empty());
    }

    #[test]
    fn rotation_reaches_target() {
        let mut v = vec![1.0, 0.0];
        assert!(!rotate_toward(&mut v, &[0.0, 1.0], 0.5));
        assert!((v[0] - 0.5f64.cos()).abs() < 1e-12);
        for _ in 0..3 {
            rotate_toward(&mut v, &[0.0, 1.0], 0.5);
        }
        assert_eq!(v, vec![0.0, 1.0]);
    }

    #[test]
    fn lifetime_pmf_sums_to_one() {
        let m = LifetimeModel { long_weight: 0.3, rho: 0.9, max_days: 60 };
        assert!((m.pmf().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
