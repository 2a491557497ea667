//! Scaled in-batch-negative cross-entropy.
//!
//! Every term contrasts one anchor against one positive and a set of
//! negatives with logits `s · cos(anchor, candidate)`:
//!
//! `loss = −log( exp(s·cos(a, p)) / Σ_c exp(s·cos(a, c)) )`
//!
//! where `c` ranges over the positive and all negatives.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{axpy, cosine, dot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    FullPool,
    Sampled(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub scale: f64,
    pub w_short: f64,
    pub w_long: f64,
    /// Long-term horizon `m`.
    pub horizon: usize,
    pub negatives: NegativeMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { scale: 16.0, w_short: 0.5, w_long: 0.5, horizon: 5, negatives: NegativeMode::FullPool }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(invalid("scale must be positive"));
        }
        if self.w_short < 0.0 || self.w_long < 0.0 || (self.w_short + self.w_long - 1.0).abs() > 1e-9 {
            return Err(invalid("loss weights must be nonnegative and sum to 1"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        Ok(())
    }
}

/// `−log softmax` of the first logit, computed stably. Exactly zero for a
/// single logit.
pub fn softmax_cross_entropy(positive: f64, negatives: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = negatives.clone().fold(positive, f64::max);
    // Σ over everything except one copy of the maximum, then log1p.
    let mut rest = 0.0;
    let mut skipped = false;
    for z in core::iter::once(positive).chain(negatives) {
        if !skipped && z == max {
            skipped = true;
            continue;
        }
        rest += libm::exp(z - max);
    }
    (max - positive) + libm::log1p(rest)
}

/// Scaled cross-entropy of one anchor by cosine similarity.
pub fn scaled_cross_entropy(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], scale: f64) -> f64 {
    let pos = scale * cosine(anchor, positive);
    softmax_cross_entropy(pos, negatives.iter().map(|n| scale * cosine(anchor, n)))
}

/// Loss of one unit-norm anchor against a unit-norm positive and the rows of
/// `negatives` (`n × dim`, unit norm). Adds `weight · ∂loss/∂anchor` to
/// `grad`.
pub fn contrast_with_grad(anchor: &[f64], positive: &[f64], negatives: &[f64], scale: f64, weight: f64, grad: &mut [f64]) -> f64 {
    let dim = anchor.len();
    let zp = scale * dot(anchor, positive);
    let zs: Vec<f64> = negatives.chunks_exact(dim).map(|c| scale * dot(anchor, c)).collect();
    let loss = softmax_cross_entropy(zp, zs.iter().copied());
    if weight != 0.0 && !zs.is_empty() {
        // softmax over [positive; negatives]
        let max = zs.iter().copied().fold(zp, f64::max);
        let ep = libm::exp(zp - max);
        let es: Vec<f64> = zs.iter().map(|z| libm::exp(z - max)).collect();
        let total = ep + es.iter().sum::<f64>();
        axpy(weight * scale * (ep / total - 1.0), positive, grad);
        for (c, e) in negatives.chunks_exact(dim).zip(&es) {
            axpy(weight * scale * e / total, c, grad);
        }
    }
    loss
}

/// Candidate negatives drawn from the posts of every user in a batch.
///
/// Entries are unique by post id; each remembers every user who owns it so
/// that no anchor is contrasted against its own posts.
#[derive(Debug, Clone, Default)]
pub struct NegativePool {
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f64>,
    owners: Vec<Vec<u64>>,
    index: BTreeMap<u64, usize>,
}

impl NegativePool {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, idx: usize) -> &[f64] {
        &self.vectors[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn owners(&self, idx: usize) -> &[u64] {
        &self.owners[idx]
    }

    /// Adds `post_id` owned by `owner`; repeated ids only gain an owner.
    pub fn push(&mut self, owner: u64, post_id: u64, vector: &[f64]) {
        debug_assert_eq!(vector.len(), self.dim);
        if let Some(&i) = self.index.get(&post_id) {
            if !self.owners[i].contains(&owner) {
                self.owners[i].push(owner);
            }
            return;
        }
        self.index.insert(post_id, self.ids.len());
        self.ids.push(post_id);
        self.vectors.extend_from_slice(vector);
        self.owners.push(alloc::vec![owner]);
    }

    /// Indices usable as negatives for `anchor_user`: every entry not owned
    /// by that user and not in `exclude_ids`.
    pub fn negatives_for(&self, anchor_user: u64, exclude_ids: &BTreeSet<u64>) -> Vec<usize> {
        (0..self.ids.len())
            .filter(|&i| !self.owners[i].contains(&anchor_user) && !exclude_ids.contains(&self.ids[i]))
            .collect()
    }

    /// Row-major copy of the selected entries' vectors.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            out.extend_from_slice(self.vector(i));
        }
        out
    }
}

/// Uniform sample of `k` candidates without replacement, in ascending order.
/// Returns every candidate when `k ≥ candidates.len()`.
pub fn sample_negatives<R: Rng + ?Sized>(candidates: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if k >= candidates.len() {
        return candidates.to_vec();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect();
    picked.sort_unstable();
    picked
}

/// `w_short · short + w_long · long`.
pub fn total_loss(short: f64, long: f64, config: &LossConfig) -> f64 {
    config.w_short * short + config.w_long * long
}
