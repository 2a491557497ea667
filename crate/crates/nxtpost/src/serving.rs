//! Serving simulation: a versioned embedding store with atomic snapshot
//! swaps, daily user refresh, exact top-K retrieval and threshold filtering.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use nxtpost_core::metrics::{top_k, Corpus};
use nxtpost_core::model::UserModel;
use nxtpost_core::{EmbeddingLookup, SequenceSample};

use crate::error::{config, Error, Result};
use crate::post_encoder::PostEncoder;
use crate::synth::{by_user, InteractionEvent, Post, DAY};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub vector: Vec<f64>,
    pub version: u64,
    pub updated_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PostMeta {
    pub created_at: i64,
    pub lifetime_days: u32,
}

impl PostMeta {
    fn alive_on(&self, day: i64) -> bool {
        day >= self.created_at && day < self.created_at + i64::from(self.lifetime_days)
    }
}

/// An immutable view of the store.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub id: u64,
    pub day: i64,
    pub posts: Arc<BTreeMap<u64, (Entry, PostMeta)>>,
    pub users: Arc<BTreeMap<u64, Entry>>,
    /// Posts alive on `day`, the retrieval corpus.
    pub alive: Arc<Corpus>,
}

impl EmbeddingLookup for Snapshot {
    fn dim(&self) -> usize {
        self.alive.dim()
    }

    fn get(&self, post_id: u64) -> Option<&[f64]> {
        self.posts.get(&post_id).map(|(e, _)| e.vector.as_slice())
    }
}

#[derive(Default)]
struct Staging {
    posts: BTreeMap<u64, (Entry, PostMeta)>,
    users: BTreeMap<u64, Entry>,
    day: Option<i64>,
}

/// Readers take the current snapshot; the single writer stages updates and
/// publishes them as one new snapshot.
pub struct EmbeddingStore {
    dim: usize,
    current: RwLock<Arc<Snapshot>>,
    staging: Mutex<Staging>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        let empty = Snapshot { id: 0, day: 0, posts: Arc::default(), users: Arc::default(), alive: Arc::new(Corpus::new(dim)) };
        Self { dim, current: RwLock::new(Arc::new(empty)), staging: Mutex::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found == self.dim {
            Ok(())
        } else {
            Err(nxtpost_core::Error::DimensionMismatch { expected: self.dim, found }.into())
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock").clone()
    }

    /// Embeds and stages a post; it becomes visible at the next publish.
    /// Returns the new version.
    pub fn upsert_post(&self, post: &Post, encoder: &PostEncoder, now: i64) -> Result<u64> {
        if post.integrity {
            return Err(Error::IntegrityRejected(post.post_id));
        }
        let vector = encoder.encode(post)?;
        let meta = PostMeta { created_at: post.created_at, lifetime_days: post.lifetime_days };
        self.stage_post(post.post_id, vector, meta, now)
    }

    pub fn stage_post(&self, post_id: u64, vector: Vec<f64>, meta: PostMeta, now: i64) -> Result<u64> {
        self.check_dim(vector.len())?;
        let current = self.snapshot();
        let mut st = self.staging.lock().expect("staging lock");
        let prev = st.posts.get(&post_id).map(|(e, _)| e.version).or_else(|| current.posts.get(&post_id).map(|(e, _)| e.version));
        let version = prev.unwrap_or(0) + 1;
        st.posts.insert(post_id, (Entry { vector, version, updated_at: now }, meta));
        Ok(version)
    }

    pub fn stage_user(&self, user_id: u64, vector: Vec<f64>, now: i64) -> Result<u64> {
        self.check_dim(vector.len())?;
        let current = self.snapshot();
        let mut st = self.staging.lock().expect("staging lock");
        let prev = st.users.get(&user_id).map(|e| e.version).or_else(|| current.users.get(&user_id).map(|e| e.version));
        let version = prev.unwrap_or(0) + 1;
        st.users.insert(user_id, Entry { vector, version, updated_at: now });
        Ok(version)
    }

    /// Sets the serving day used for the alive corpus at the next publish.
    pub fn stage_day(&self, day: i64) {
        self.staging.lock().expect("staging lock").day = Some(day);
    }

    /// Applies all staged updates as one new snapshot and swaps it in.
    pub fn publish(&self) -> u64 {
        let staged = std::mem::take(&mut *self.staging.lock().expect("staging lock"));
        let current = self.snapshot();
        let day = staged.day.unwrap_or(current.day);
        let posts = if staged.posts.is_empty() {
            current.posts.clone()
        } else {
            let mut p = (*current.posts).clone();
            p.extend(staged.posts);
            Arc::new(p)
        };
        let users = if staged.users.is_empty() {
            current.users.clone()
        } else {
            let mut u = (*current.users).clone();
            u.extend(staged.users);
            Arc::new(u)
        };
        let mut alive = Corpus::new(self.dim);
        for (&id, (e, meta)) in posts.iter() {
            if meta.alive_on(day) {
                alive.insert(id, &e.vector).expect("dimension checked when staged");
            }
        }
        let next = Arc::new(Snapshot { id: current.id + 1, day, posts, users, alive: Arc::new(alive) });
        let id = next.id;
        *self.current.write().expect("snapshot lock") = next;
        id
    }
}

/// Per-user time of the newest event already reflected in the store.
#[derive(Debug, Clone, Default)]
pub struct RefreshState {
    pub last_event: BTreeMap<u64, i64>,
}

/// The serving-side sample of `user` at `now`: the last `l_max` events
/// before `now` on non-integrity posts.
pub fn serving_sample(user: u64, events: &[InteractionEvent], integrity: &dyn Fn(u64) -> bool, l_max: usize, now: i64) -> SequenceSample {
    let mut history: Vec<_> =
        events.iter().filter(|e| e.timestamp < now && !integrity(e.post_id)).map(InteractionEvent::history_event).collect();
    let start = history.len().saturating_sub(l_max);
    history.drain(..start);
    SequenceSample { user_id: user, history, long_targets: Vec::new(), cutoff_time: now }
}

/// Recomputes embeddings of users with events newer than their last refresh,
/// using events before `now`, and publishes them as one snapshot. Users
/// whose history references a post missing from the store are skipped.
pub fn refresh_users(
    store: &EmbeddingStore,
    model: &UserModel,
    events: &[InteractionEvent],
    integrity: &dyn Fn(u64) -> bool,
    state: &mut RefreshState,
    now: i64,
) -> Result<usize> {
    let snap = store.snapshot();
    let mut refreshed = 0;
    for (user, evs) in by_user(events) {
        let newest = evs.iter().filter(|e| e.timestamp < now).map(|e| e.timestamp).max();
        let Some(newest) = newest else { continue };
        if state.last_event.get(&user).is_some_and(|&t| t >= newest) {
            continue;
        }
        let sample = serving_sample(user, &evs, integrity, model.l_max(), now);
        match model.user_vector(&sample, snap.as_ref()) {
            Ok(v) => {
                store.stage_user(user, v, now)?;
                state.last_event.insert(user, newest);
                refreshed += 1;
            }
            Err(nxtpost_core::Error::MissingEmbedding(p)) => log::warn!("user {user} skipped: post {p} has no embedding"),
            Err(e) => return Err(e.into()),
        }
    }
    if refreshed > 0 {
        store.publish();
    }
    Ok(refreshed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub user_id: u64,
    /// `(post_id, score)`, scores non-increasing.
    pub items: Vec<(u64, f64)>,
    /// Entries of the top K dropped by the threshold.
    pub filtered_count: usize,
    pub snapshot_id: u64,
}

/// Exact top-`k` over alive posts, then drops scores below `threshold`.
pub fn retrieve(snapshot: &Snapshot, user_id: u64, k: usize, threshold: f64) -> Result<QueryResult> {
    if k == 0 {
        return Err(config("k must be positive"));
    }
    let user = snapshot.users.get(&user_id).ok_or(Error::ColdUser(user_id))?;
    let top = top_k(&user.vector, &snapshot.alive, k);
    let before = top.len();
    let items: Vec<(u64, f64)> = top.into_iter().filter(|&(_, s)| s >= threshold).collect();
    let filtered_count = before - items.len();
    Ok(QueryResult { user_id, items, filtered_count, snapshot_id: snapshot.id })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub attainable: bool,
}

/// Smallest threshold whose retained `(score, relevant)` results reach
/// `target_precision`.
pub fn calibrate_threshold(results: &[(f64, bool)], target_precision: f64) -> Calibration {
    let total_relevant = results.iter().filter(|r| r.1).count();
    let mut sorted: Vec<(f64, bool)> = results.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut candidates: Vec<f64> = vec![-1.0];
    candidates.extend(sorted.iter().map(|r| r.0));
    candidates.dedup();
    // Suffix counts: retained = everything at index >= i.
    let n = sorted.len();
    let mut rel_suffix = vec![0usize; n + 1];
    for i in (0..n).rev() {
        rel_suffix[i] = rel_suffix[i + 1] + usize::from(sorted[i].1);
    }
    let stats = |t: f64| {
        let i = sorted.partition_point(|r| r.0 < t);
        let kept = n - i;
        let rel = rel_suffix[i];
        let precision = if kept == 0 { 0.0 } else { rel as f64 / kept as f64 };
        let recall = if total_relevant == 0 { 0.0 } else { rel as f64 / total_relevant as f64 };
        (kept, precision, recall)
    };
    for &t in &candidates {
        let (kept, precision, recall) = stats(t);
        if kept > 0 && precision >= target_precision || target_precision <= 0.0 {
            return Calibration { threshold: t, precision, recall, attainable: true };
        }
    }
    log::warn!("target precision {target_precision} unattainable; using the maximum score");
    let t = sorted.last().map_or(1.0, |r| r.0);
    let (_, precision, recall) = stats(t);
    Calibration { threshold: t, precision, recall, attainable: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLogEntry {
    pub user_id: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub threshold: f64,
    pub ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub ts: i64,
}

impl QueryLogEntry {
    pub fn from_result(r: &QueryResult, k: usize, threshold: f64, ts: i64) -> Self {
        Self { user_id: r.user_id, k, threshold, ids: r.items.iter().map(|i| i.0).collect(), scores: r.items.iter().map(|i| i.1).collect(), ts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeSimReport {
    pub days: Vec<i64>,
    pub posts_upserted: usize,
    pub posts_rejected: usize,
    pub users_refreshed: Vec<usize>,
    pub queries: usize,
    pub cold_queries: usize,
    pub hits: usize,
    pub calibration: Calibration,
    pub mean_query_micros: f64,
}

/// Simulated serving days: each day upserts that day's posts, refreshes
/// users from events before the day, publishes, and queries every user
/// active that day. Hits count queries whose results contain a post the
/// user engaged that day.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    posts: &[Post],
    events: &[InteractionEvent],
    encoder: &PostEncoder,
    model: &UserModel,
    dim: usize,
    days: std::ops::Range<i64>,
    k: usize,
    threshold: f64,
    target_precision: f64,
    log_path: Option<&Path>,
) -> Result<ServeSimReport> {
    let store = EmbeddingStore::new(dim);
    let integrity: BTreeMap<u64, bool> = posts.iter().map(|p| (p.post_id, p.integrity)).collect();
    let flagged = |id: u64| integrity.get(&id).copied().unwrap_or(false);
    let mut state = RefreshState::default();
    let mut report = ServeSimReport {
        days: days.clone().collect(),
        posts_upserted: 0,
        posts_rejected: 0,
        users_refreshed: Vec::new(),
        queries: 0,
        cold_queries: 0,
        hits: 0,
        calibration: Calibration { threshold: -1.0, precision: 0.0, recall: 0.0, attainable: true },
        mean_query_micros: 0.0,
    };
    let mut log = Vec::new();
    let mut labelled: Vec<(f64, bool)> = Vec::new();
    let mut query_time = 0.0;
    let per_user = by_user(events);
    let mut published_through = i64::MIN;
    for day in days {
        for p in posts.iter().filter(|p| p.created_at > published_through && p.created_at <= day) {
            match store.upsert_post(p, encoder, p.created_at * DAY) {
                Ok(_) => report.posts_upserted += 1,
                Err(Error::IntegrityRejected(_)) => report.posts_rejected += 1,
                Err(e) => return Err(e),
            }
        }
        published_through = day;
        store.stage_day(day);
        store.publish();
        let n = refresh_users(&store, model, events, &flagged, &mut state, day * DAY)?;
        report.users_refreshed.push(n);
        let snap = store.snapshot();
        for (&user, evs) in &per_user {
            let today: Vec<u64> = evs.iter().filter(|e| e.timestamp.div_euclid(DAY) == day).map(|e| e.post_id).collect();
            if today.is_empty() {
                continue;
            }
            let start = std::time::Instant::now();
            let result = retrieve(&snap, user, k, threshold);
            query_time += start.elapsed().as_secs_f64();
            match result {
                Ok(r) => {
                    report.queries += 1;
                    report.hits += usize::from(r.items.iter().any(|(id, _)| today.contains(id)));
                    labelled.extend(r.items.iter().map(|&(id, s)| (s, today.contains(&id))));
                    log.push(QueryLogEntry::from_result(&r, k, threshold, day * DAY));
                }
                Err(Error::ColdUser(_)) => report.cold_queries += 1,
                Err(e) => return Err(e),
            }
        }
    }
    report.calibration = calibrate_threshold(&labelled, target_precision);
    report.mean_query_micros = 1e6 * query_time / report.queries.max(1) as f64;
    if let Some(path) = log_path {
        crate::io::write_jsonl(path, &log)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_edges() {
        let r = [(0.9, true), (0.8, true), (0.3, false), (0.2, false)];
        assert_eq!(calibrate_threshold(&r, 0.0).threshold, -1.0);
        let c = calibrate_threshold(&r, 1.0);
        assert!(c.attainable && c.precision == 1.0 && c.threshold > 0.3 && c.threshold <= 0.8);
        let none = calibrate_threshold(&[(0.5, false)], 0.5);
        assert!(!none.attainable);
    }

    #[test]
    fn versions_increase() {
        let store = EmbeddingStore::new(2);
        let meta = PostMeta { created_at: 0, lifetime_days: 3 };
        assert_eq!(store.stage_post(1, vec![1.0, 0.0], meta, 0).unwrap(), 1);
        store.publish();
        assert_eq!(store.stage_post(1, vec![0.0, 1.0], meta, 1).unwrap(), 2);
        assert_eq!(store.snapshot().posts[&1].0.vector, vec![1.0, 0.0]);
        store.publish();
        assert_eq!(store.snapshot().posts[&1].0.vector, vec![0.0, 1.0]);
    }
}
