//! Fixed post embeddings: the oracle encoder and the trained multi-channel
//! post tower, behind one interface.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nxtpost_core::fusion::{pair_batch_loss, PostFeatures, PostTower, PostTowerConfig};
use nxtpost_core::linalg::normalize;
use nxtpost_core::optim::{clip_global_norm, Adam};
use nxtpost_core::params::round_to_f32;
use nxtpost_core::EmbeddingLookup;

use crate::config::{DatasetConfig, PostEncoderConfig};
use crate::error::{Error, Result};
use crate::seed::{self, streams};
use crate::synth::{by_user, InteractionEvent, Post, DAY};

/// Unit-norm post vectors keyed by id, stored at `f32` precision.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PostEmbeddings {
    pub dim: usize,
    pub version: u32,
    pub vectors: BTreeMap<u64, Vec<f64>>,
}

impl PostEmbeddings {
    pub fn new(dim: usize, version: u32) -> Self {
        Self { dim, version, vectors: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, id: u64, mut v: Vec<f64>) {
        debug_assert_eq!(v.len(), self.dim);
        round_to_f32(&mut v);
        self.vectors.insert(id, v);
    }
}

impl EmbeddingLookup for PostEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn get(&self, post_id: u64) -> Option<&[f64]> {
        self.vectors.get(&post_id).map(Vec::as_slice)
    }
}

/// Produces one post's embedding. Callers never learn which kind is used.
#[derive(Debug, Clone)]
pub enum PostEncoder {
    /// `normalize(topic + ε)`, `ε ~ N(0, σ²I)`, noise seeded per post.
    Oracle { sigma: f64, seed: u64 },
    Trained { tower: PostTower, languages: usize, countries: usize },
    /// Looks vectors up in an embedding file already computed.
    Precomputed(std::sync::Arc<PostEmbeddings>),
}

impl PostEncoder {
    pub fn dim(&self, topic_dim: usize) -> usize {
        match self {
            PostEncoder::Oracle { .. } => topic_dim,
            PostEncoder::Trained { tower, .. } => tower.config.out_dim,
            PostEncoder::Precomputed(e) => e.dim,
        }
    }

    pub fn encode(&self, post: &Post) -> Result<Vec<f64>> {
        let mut v = match self {
            PostEncoder::Oracle { sigma, seed } => {
                let mut rng = seed::rng(*seed, streams::ORACLE, post.post_id);
                let mut v: Vec<f64> = post.topic.iter().map(|t| t + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
                normalize(&mut v);
                v
            }
            PostEncoder::Trained { tower, languages, countries } => {
                tower.encode(&post_features(post, &tower.config, *languages, *countries))?
            }
            PostEncoder::Precomputed(e) => {
                return e.get(post.post_id).map(<[f64]>::to_vec).ok_or(nxtpost_core::Error::MissingEmbedding(post.post_id).into())
            }
        };
        round_to_f32(&mut v);
        Ok(v)
    }

    /// Embeds every post in parallel.
    pub fn encode_all<'a>(&self, posts: impl IntoParallelIterator<Item = &'a Post>, dim: usize, version: u32) -> Result<PostEmbeddings> {
        let pairs: Vec<(u64, Vec<f64>)> = posts.into_par_iter().map(|p| self.encode(p).map(|v| (p.post_id, v))).collect::<Result<_>>()?;
        Ok(PostEmbeddings { dim, version, vectors: pairs.into_iter().collect() })
    }
}

/// Tower channel features of a post. Missing or wrongly sized channels
/// become zero vectors.
pub fn post_features(post: &Post, cfg: &PostTowerConfig, languages: usize, countries: usize) -> PostFeatures {
    let c = cfg.channel_dim;
    let text = if post.text_channel.len() == c {
        post.text_channel.clone()
    } else {
        log::warn!("post {}: text channel missing or mis-sized, using zeros", post.post_id);
        vec![0.0; c]
    };
    let images = post.image_channels.iter().filter(|i| i.len() == c).take(cfg.max_images).cloned().collect();
    let mut attrs = vec![0.0; cfg.attr_dim];
    let lang = post.lang as usize;
    let country = languages + post.country as usize;
    if lang < languages && country < attrs.len() && languages + countries <= attrs.len() {
        attrs[lang] = 1.0;
        attrs[country] = 1.0;
    } else {
        log::warn!("post {}: attributes out of range, using zeros", post.post_id);
    }
    PostFeatures { text, images, attrs }
}

/// Post tower dimensions adapted to a dataset's channel and attribute sizes.
pub fn tower_config_for(dataset: &DatasetConfig, base: &PostTowerConfig) -> PostTowerConfig {
    PostTowerConfig {
        channel_dim: dataset.channel_dim,
        attr_dim: dataset.languages + dataset.countries,
        max_images: dataset.max_images,
        ..base.clone()
    }
}

/// Pairs of distinct posts engaged consecutively by one user within
/// `window_days`, deduplicated and subsampled to at most `max_pairs`.
pub fn co_engagement_pairs(events: &[InteractionEvent], window_days: i64, max_pairs: usize, seed: u64) -> Vec<(u64, u64)> {
    let mut set = BTreeSet::new();
    for evs in by_user(events).values() {
        for w in evs.windows(2) {
            if w[0].post_id != w[1].post_id && w[1].timestamp - w[0].timestamp <= window_days * DAY {
                set.insert((w[0].post_id, w[1].post_id));
            }
        }
    }
    let mut pairs: Vec<(u64, u64)> = set.into_iter().collect();
    let mut rng = seed::rng(seed, streams::PAIRS, 0);
    pairs.shuffle(&mut rng);
    pairs.truncate(max_pairs);
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostTowerReport {
    pub losses: Vec<f64>,
    pub pairs: usize,
}

/// Trains the post tower on co-engaged pairs with in-batch negatives.
pub fn train_post_tower(
    posts: &BTreeMap<u64, &Post>,
    pairs: &[(u64, u64)],
    dataset: &DatasetConfig,
    cfg: &PostEncoderConfig,
    seed: u64,
) -> Result<(PostTower, PostTowerReport)> {
    let b = cfg.batch_size;
    let pairs: Vec<(u64, u64)> = pairs.iter().copied().filter(|(a, p)| posts.contains_key(a) && posts.contains_key(p)).collect();
    if b == 0 || pairs.len() < b {
        return Err(Error::NotEnoughData(format!("{} post pairs for batch size {b}", pairs.len())));
    }
    let tcfg = tower_config_for(dataset, &cfg.tower);
    let mut tower = PostTower::new(tcfg.clone(), &mut seed::rng(seed, streams::INIT, 1))?;
    let features: BTreeMap<u64, PostFeatures> = pairs
        .iter()
        .flat_map(|&(a, p)| [a, p])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|id| (id, post_features(posts[&id], &tcfg, dataset.languages, dataset.countries)))
        .collect();
    let mut adam = Adam::new(tower.values.len(), cfg.learning_rate);
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed, streams::SHUFFLE, 1_000_000 + epoch as u64));
        for chunk in order.chunks_exact(b) {
            let anchors: Vec<(u64, &PostFeatures)> = chunk.iter().map(|&i| (pairs[i].0, &features[&pairs[i].0])).collect();
            let positives: Vec<(u64, &PostFeatures)> = chunk.iter().map(|&i| (pairs[i].1, &features[&pairs[i].1])).collect();
            let mut grads = vec![0.0; tower.values.len()];
            let loss = pair_batch_loss(&tower, &anchors, &positives, cfg.scale, Some(&mut grads))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { step: losses.len(), users: chunk.iter().map(|&i| pairs[i].0).collect() });
            }
            clip_global_norm(&mut grads, 1.0);
            adam.step(&mut tower.values, &grads);
            round_to_f32(&mut tower.values);
            losses.push(loss);
        }
    }
    Ok((tower, PostTowerReport { losses, pairs: pairs.len() }))
}

/// Mean cosine of same-cluster and cross-cluster post pairs, judged by
/// topic similarity above / below `threshold`.
pub fn topic_separation(posts: &[&Post], embeddings: &dyn EmbeddingLookup, threshold: f64) -> (f64, f64) {
    use nxtpost_core::linalg::dot;
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in posts.iter().enumerate() {
        for b in &posts[i + 1..] {
            let (Some(ea), Some(eb)) = (embeddings.get(a.post_id), embeddings.get(b.post_id)) else { continue };
            let c = dot(ea, eb);
            if dot(&a.topic, &b.topic) >= threshold {
                same += c;
                ns += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    (same / ns.max(1) as f64, cross / nc.max(1) as f64)
}
