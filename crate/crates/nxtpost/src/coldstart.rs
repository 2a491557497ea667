//! History backfill for cold-start and marginal users.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use nxtpost_core::{ActionType, HistoryEvent, SequenceSample, Surface};

use crate::error::{config, Result};
use crate::synth::{InteractionEvent, Post};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum BackfillMode {
    None,
    Popular,
    SimilarUser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackfillPolicy {
    pub mode: BackfillMode,
    /// Users with fewer real events than this are backfilled.
    pub marginal_threshold: usize,
    /// History length backfill aims for.
    pub fill_to: usize,
    pub neighbors: usize,
    /// Days of events before the cutoff used for popularity and similarity.
    pub window_days: usize,
}

impl Default for BackfillPolicy {
    fn default() -> Self {
        Self { mode: BackfillMode::None, marginal_threshold: 3, fill_to: 8, neighbors: 1, window_days: 7 }
    }
}

impl BackfillPolicy {
    pub fn validate(&self, l_max: usize) -> Result<()> {
        if self.fill_to > l_max {
            return Err(config(format!("fill_to {} exceeds l_max {l_max}", self.fill_to)));
        }
        if self.neighbors == 0 || self.window_days == 0 {
            return Err(config("neighbors and window_days must be positive"));
        }
        Ok(())
    }

    /// Number of backfill events for a user with `real` events.
    pub fn needed(&self, real: usize) -> usize {
        if real >= self.marginal_threshold {
            0
        } else {
            self.fill_to.saturating_sub(real)
        }
    }
}

/// Engagement counts of a training window with post attributes.
pub struct Popularity {
    /// `(count, post_id, lang, country)` sorted by count desc, id asc.
    ranked: Vec<(usize, u64, u32, u32)>,
}

impl Popularity {
    pub fn build(events_window: &[InteractionEvent], posts: &BTreeMap<u64, &Post>) -> Self {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for e in events_window {
            *counts.entry(e.post_id).or_default() += 1;
        }
        let mut ranked: Vec<(usize, u64, u32, u32)> = counts
            .into_iter()
            .filter_map(|(id, n)| posts.get(&id).filter(|p| !p.integrity).map(|p| (n, id, p.lang, p.country)))
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        Self { ranked }
    }

    /// Most popular posts matching `(lang, country)`, or globally when no
    /// post matches.
    pub fn top(&self, lang: u32, country: u32, exclude: &BTreeSet<u64>, n: usize) -> Vec<u64> {
        let matching: Vec<u64> =
            self.ranked.iter().filter(|r| r.2 == lang && r.3 == country && !exclude.contains(&r.1)).map(|r| r.1).take(n).collect();
        if !matching.is_empty() || n == 0 {
            return matching;
        }
        log::debug!("no popular posts for lang {lang} country {country}; using global popularity");
        self.ranked.iter().filter(|r| !exclude.contains(&r.1)).map(|r| r.1).take(n).collect()
    }
}

/// Backfill events placed one second apart just before `before`, oldest first.
fn as_backfill(post_ids: &[u64], before: i64) -> Vec<HistoryEvent> {
    let n = post_ids.len() as i64;
    post_ids
        .iter()
        .enumerate()
        .map(|(i, &post_id)| HistoryEvent { post_id, action: ActionType::Backfill, surface: Surface::Feed, timestamp: before - n + i as i64 })
        .collect()
}

fn first_time(real: &[HistoryEvent], cutoff: i64) -> i64 {
    real.first().map_or(cutoff, |e| e.timestamp)
}

pub fn popular_backfill(
    lang: u32,
    country: u32,
    real: &[HistoryEvent],
    popularity: &Popularity,
    policy: &BackfillPolicy,
    cutoff: i64,
) -> Vec<HistoryEvent> {
    let need = policy.needed(real.len());
    if need == 0 {
        return Vec::new();
    }
    let exclude: BTreeSet<u64> = real.iter().map(|e| e.post_id).collect();
    let mut ids = popularity.top(lang, country, &exclude, need);
    // Most popular ends up closest to the real events.
    ids.reverse();
    as_backfill(&ids, first_time(real, cutoff))
}

/// TF-IDF weighted post-incidence vectors of users, L2-normalized.
pub struct UserSimilarity {
    vectors: BTreeMap<u64, BTreeMap<u64, f64>>,
    by_post: BTreeMap<u64, Vec<u64>>,
}

impl UserSimilarity {
    pub fn build(events_window: &[InteractionEvent]) -> Self {
        let mut sets: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        for e in events_window {
            sets.entry(e.user_id).or_default().insert(e.post_id);
        }
        let mut by_post: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for (&u, posts) in &sets {
            for &p in posts {
                by_post.entry(p).or_default().push(u);
            }
        }
        let n_users = sets.len() as f64;
        let vectors = sets
            .into_iter()
            .map(|(u, posts)| {
                let mut v: BTreeMap<u64, f64> = posts.into_iter().map(|p| (p, (1.0 + n_users / by_post[&p].len() as f64).ln())).collect();
                let norm = v.values().map(|w| w * w).sum::<f64>().sqrt();
                v.values_mut().for_each(|w| *w /= norm);
                (u, v)
            })
            .collect();
        Self { vectors, by_post }
    }

    /// Cosine of two users' engagement vectors; `None` when either has no
    /// events in the window.
    pub fn similarity(&self, a: u64, b: u64) -> Option<f64> {
        let (va, vb) = (self.vectors.get(&a)?, self.vectors.get(&b)?);
        let (small, large) = if va.len() <= vb.len() { (va, vb) } else { (vb, va) };
        Some(small.iter().filter_map(|(p, w)| large.get(p).map(|x| w * x)).sum())
    }

    /// Users with positive similarity to a set of engaged posts, best first
    /// (ties by ascending id), excluding `user`.
    pub fn neighbors_of_posts(&self, user: u64, posts: &BTreeSet<u64>, n: usize) -> Vec<(u64, f64)> {
        let n_users = self.vectors.len() as f64;
        let mut query: BTreeMap<u64, f64> = posts
            .iter()
            .filter_map(|p| self.by_post.get(p).map(|us| (*p, (1.0 + n_users / us.len() as f64).ln())))
            .collect();
        let norm = query.values().map(|w| w * w).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Vec::new();
        }
        query.values_mut().for_each(|w| *w /= norm);
        let mut scores: BTreeMap<u64, f64> = BTreeMap::new();
        for (p, w) in &query {
            for &v in &self.by_post[p] {
                if v != user {
                    *scores.entry(v).or_default() += w * self.vectors[&v][p];
                }
            }
        }
        let mut ranked: Vec<(u64, f64)> = scores.into_iter().filter(|&(_, s)| s > 0.0).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(n);
        ranked
    }
}

/// Backfill from the most recent events of the most similar users. Users
/// with no real events, or with no positive-similarity neighbor, fall back
/// to popular backfill.
#[allow(clippy::too_many_arguments)]
pub fn similar_user_backfill(
    user: u64,
    lang: u32,
    country: u32,
    real: &[HistoryEvent],
    similarity: &UserSimilarity,
    window_by_user: &BTreeMap<u64, Vec<InteractionEvent>>,
    popularity: &Popularity,
    policy: &BackfillPolicy,
    cutoff: i64,
) -> Vec<HistoryEvent> {
    let need = policy.needed(real.len());
    if need == 0 {
        return Vec::new();
    }
    let own: BTreeSet<u64> = real.iter().map(|e| e.post_id).collect();
    let neighbors = if own.is_empty() { Vec::new() } else { similarity.neighbors_of_posts(user, &own, policy.neighbors) };
    if neighbors.is_empty() {
        log::debug!("user {user}: no similar user, using popular backfill");
        return popular_backfill(lang, country, real, popularity, policy, cutoff);
    }
    let mut picked: Vec<(i64, u64)> = Vec::new();
    let mut seen = own.clone();
    for (v, _) in neighbors {
        for e in window_by_user.get(&v).into_iter().flatten().rev() {
            if picked.len() == need {
                break;
            }
            if seen.insert(e.post_id) {
                picked.push((e.timestamp, e.post_id));
            }
        }
    }
    picked.sort();
    let ids: Vec<u64> = picked.into_iter().map(|(_, id)| id).collect();
    as_backfill(&ids, first_time(real, cutoff))
}

/// Prepends backfill events to a sample's real history.
pub fn with_backfill(sample: &SequenceSample, backfill: Vec<HistoryEvent>) -> SequenceSample {
    let mut s = sample.clone();
    let mut history = backfill;
    history.extend(sample.history.iter().copied());
    s.history = history;
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: u64, post: u64, ts: i64) -> InteractionEvent {
        InteractionEvent { user_id: user, post_id: post, action: ActionType::Like, surface: Surface::Feed, timestamp: ts }
    }

    #[test]
    fn identical_and_disjoint_sets() {
        let s = UserSimilarity::build(&[ev(1, 10, 0), ev(1, 11, 1), ev(2, 10, 0), ev(2, 11, 1), ev(3, 12, 0)]);
        assert!((s.similarity(1, 2).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(s.similarity(1, 3).unwrap(), 0.0);
        assert!((s.similarity(3, 3).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(s.similarity(1, 9), None);
    }

    #[test]
    fn needed_respects_threshold() {
        let p = BackfillPolicy { fill_to: 5, marginal_threshold: 3, ..Default::default() };
        assert_eq!(p.needed(0), 5);
        assert_eq!(p.needed(2), 3);
        assert_eq!(p.needed(3), 0);
        assert!(BackfillPolicy { fill_to: 40, ..Default::default() }.validate(32).is_err());
    }
}
