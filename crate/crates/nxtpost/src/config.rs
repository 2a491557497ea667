//! JSON-configurable settings. Every field has a default, so an empty JSON
//! object is a complete configuration.

use serde::{Deserialize, Serialize};

use nxtpost_core::encoder::EncoderConfig;
use nxtpost_core::fusion::PostTowerConfig;
use nxtpost_core::loss::LossConfig;
use nxtpost_core::ActionType;

use crate::coldstart::BackfillPolicy;
use crate::error::{config, Result};

/// Emission weight of one action type and how strongly it follows topic
/// affinity, as a multiple of `affinity_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSignal {
    pub action: ActionType,
    pub weight: f64,
    pub affinity_factor: f64,
}

fn default_actions() -> Vec<ActionSignal> {
    use ActionType::*;
    [
        (Like, 0.24, 1.0),
        (Comment, 0.08, 1.0),
        (PostClick, 0.14, 1.0),
        (Share, 0.04, 1.0),
        (CommentClick, 0.10, 0.2),
        (CommentLike, 0.08, 0.2),
        (CommentReact, 0.05, 0.2),
        (TimeSpent, 0.12, 0.6),
        (View, 0.15, 0.5),
    ]
    .into_iter()
    .map(|(action, weight, affinity_factor)| ActionSignal { action, weight, affinity_factor })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub users: usize,
    pub posts_per_day: usize,
    pub days: usize,
    /// Dimension `T` of latent topic vectors.
    pub topic_dim: usize,
    /// Number of topic clusters posts and interests are drawn around.
    pub clusters: usize,
    /// Spread of topics around their cluster center.
    pub cluster_spread: f64,
    /// Dimension `C` of raw text and image channels.
    pub channel_dim: usize,
    pub max_images: usize,
    pub text_noise: f64,
    pub image_noise: f64,
    pub languages: usize,
    pub countries: usize,
    /// Probability that a post's or user's attributes follow its topic cluster.
    pub attr_match: f64,
    /// Mean engagements per alive post per day.
    pub engagement_rate: f64,
    /// Mean of the per-user activity rate. A user's share of engagements is
    /// proportional to its rate; zero means the user never engages.
    pub activity_mean: f64,
    pub activity_sigma: f64,
    /// `s_aff`: sharpness of user choice by cosine(focus, topic).
    pub affinity_scale: f64,
    pub actions: Vec<ActionSignal>,
    /// Weights of feed, groups_tab, search, notifications.
    pub surface_weights: [f64; 4],
    pub max_components: usize,
    /// Radians per day each interest component rotates toward its target.
    pub drift_rate: f64,
    /// Probability that a user keeps yesterday's focus component.
    pub session_stickiness: f64,
    /// Probability that a newly drawn daily focus is a passing interest
    /// outside the user's components.
    pub transient_rate: f64,
    /// Fraction of week-`w` engaged posts still engaged in week `w+1`.
    pub week1: f64,
    /// Fraction still engaged in week `w+2`.
    pub week2: f64,
    pub max_lifetime_days: usize,
    pub integrity_rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            users: 600,
            posts_per_day: 150,
            days: 42,
            topic_dim: 16,
            clusters: 12,
            cluster_spread: 0.6,
            channel_dim: 32,
            max_images: 4,
            text_noise: 0.5,
            image_noise: 0.8,
            languages: 4,
            countries: 3,
            attr_match: 0.8,
            engagement_rate: 3.0,
            activity_mean: 1.0,
            activity_sigma: 0.5,
            affinity_scale: 8.0,
            actions: default_actions(),
            surface_weights: [0.6, 0.2, 0.1, 0.1],
            max_components: 3,
            drift_rate: 0.08,
            session_stickiness: 0.7,
            transient_rate: 0.0,
            week1: 0.23,
            week2: 0.10,
            max_lifetime_days: 90,
            integrity_rate: 0.02,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.posts_per_day == 0 || self.days == 0 {
            return Err(config("users, posts_per_day and days must be positive"));
        }
        if self.topic_dim == 0 || self.clusters == 0 || self.channel_dim == 0 || self.max_components == 0 {
            return Err(config("topic_dim, clusters, channel_dim and max_components must be positive"));
        }
        if self.languages == 0 || self.countries == 0 || self.max_lifetime_days == 0 {
            return Err(config("languages, countries and max_lifetime_days must be positive"));
        }
        let open = |x: f64| x > 0.0 && x < 1.0;
        if !open(self.week1) || !open(self.week2) {
            return Err(config("survival fractions must lie in (0, 1)"));
        }
        if self.week2 >= self.week1 {
            return Err(config("survival fractions must decrease over weeks"));
        }
        if !(self.engagement_rate >= 0.0) || !(self.activity_mean >= 0.0) || !(self.activity_sigma >= 0.0) {
            return Err(config("rates must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.attr_match)
            || !(0.0..=1.0).contains(&self.session_stickiness)
            || !(0.0..=1.0).contains(&self.transient_rate)
            || !(0.0..=1.0).contains(&self.integrity_rate)
        {
            return Err(config("probabilities must lie in [0, 1]"));
        }
        if self.drift_rate < 0.0 {
            return Err(config("drift_rate must be nonnegative"));
        }
        if self.actions.is_empty() || self.actions.iter().any(|a| a.weight < 0.0) || self.actions.iter().all(|a| a.weight == 0.0) {
            return Err(config("action weights must be nonnegative and not all zero"));
        }
        if self.surface_weights.iter().any(|&w| w < 0.0) || self.surface_weights.iter().sum::<f64>() <= 0.0 {
            return Err(config("surface weights must be nonnegative and not all zero"));
        }
        Ok(())
    }
}

/// How raw events become training and evaluation samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    /// Long-term horizon `m`.
    pub horizon: usize,
    pub holdout_days: usize,
    /// Events between consecutive training cut points of one user.
    pub stride: usize,
    pub max_train_per_user: usize,
    pub min_interactions: usize,
    pub drop_integrity: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { horizon: 5, holdout_days: 1, stride: 6, max_train_per_user: 12, min_interactions: 2, drop_integrity: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PostEncoderMode {
    Oracle,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostEncoderConfig {
    pub mode: PostEncoderMode,
    /// Noise of oracle embeddings `normalize(topic + ε)`.
    pub sigma: f64,
    pub tower: PostTowerConfig,
    /// Two posts engaged by one user within this many days form a pair.
    pub pair_window_days: i64,
    pub max_pairs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub scale: f64,
}

impl Default for PostEncoderConfig {
    fn default() -> Self {
        Self {
            mode: PostEncoderMode::Oracle,
            sigma: 0.1,
            tower: PostTowerConfig::default(),
            pair_window_days: 7,
            max_pairs: 20_000,
            batch_size: 64,
            epochs: 3,
            learning_rate: 2e-3,
            scale: 16.0,
        }
    }
}

/// Rows of the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Variant {
    BaselineAvg,
    Ttt,
    TttCls,
    TttCausal,
    TttCausalLong,
    TttCausalLongShort,
    FullWithTime,
    /// Causal model trained with the short-term loss only.
    CausalShort,
}

impl Variant {
    pub const LADDER: [Variant; 7] = [
        Variant::BaselineAvg,
        Variant::Ttt,
        Variant::TttCls,
        Variant::TttCausal,
        Variant::TttCausalLong,
        Variant::TttCausalLongShort,
        Variant::FullWithTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineAvg => "baseline_avg",
            Variant::Ttt => "ttt",
            Variant::TttCls => "ttt_cls",
            Variant::TttCausal => "ttt_causal",
            Variant::TttCausalLong => "ttt_causal_long",
            Variant::TttCausalLongShort => "ttt_causal_long_short",
            Variant::FullWithTime => "full_with_time",
            Variant::CausalShort => "causal_short",
        }
    }

    /// Applies the variant's switches to the base encoder and loss settings.
    pub fn resolve(self, base: &EncoderConfig, loss: &LossConfig) -> (EncoderConfig, LossConfig) {
        let mut enc = base.clone();
        let mut l = loss.clone();
        let (causal, cls, time) = match self {
            Variant::BaselineAvg | Variant::Ttt => (false, false, false),
            Variant::TttCls => (false, true, false),
            Variant::TttCausal | Variant::TttCausalLong | Variant::TttCausalLongShort | Variant::CausalShort => (true, true, false),
            Variant::FullWithTime => (true, true, true),
        };
        enc.causal = causal;
        enc.use_cls = cls;
        enc.use_rel_time = time;
        match self {
            Variant::BaselineAvg | Variant::Ttt | Variant::TttCls | Variant::TttCausal => {
                l.horizon = 1;
                l.w_short = 0.0;
                l.w_long = 1.0;
            }
            Variant::TttCausalLong => {
                l.w_short = 0.0;
                l.w_long = 1.0;
            }
            Variant::CausalShort => {
                l.w_short = 1.0;
                l.w_long = 0.0;
            }
            Variant::TttCausalLongShort | Variant::FullWithTime => {}
        }
        (enc, l)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Hidden width of the averaged-embedding baseline.
    pub baseline_hidden: usize,
    /// Run eval Hits after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 7e-4,
            grad_clip: 1.0,
            dropout: 0.2,
            epochs: 10,
            seed: 0,
            variant: Variant::FullWithTime,
            baseline_hidden: 64,
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config("batch_size must be at least 2 for contrastive training"));
        }
        if !(self.learning_rate >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(config("learning_rate must be nonnegative and grad_clip positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub batch_ks: Vec<usize>,
    pub knn_ks: Vec<usize>,
    /// Number of reshuffled batchings averaged by batch Hits@K.
    pub batch_rounds: usize,
    pub max_stale_days: usize,
    /// Final days of the world used as staleness eval days.
    pub stale_eval_days: usize,
    pub decay_days: usize,
    /// Number of consecutive start days pooled by the temporal-decay experiment.
    pub decay_starts: usize,
    /// Days before the first start day whose targets train the
    /// temporal-decay models.
    pub decay_train_days: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            batch_ks: vec![1, 10],
            knn_ks: vec![10, 20],
            batch_rounds: 4,
            max_stale_days: 6,
            stale_eval_days: 3,
            decay_days: 7,
            decay_starts: 3,
            decay_train_days: 14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServingConfig {
    pub k: usize,
    pub threshold: f64,
    pub target_precision: f64,
    /// Simulated days served after the training period.
    pub days: usize,
}

impl Default for ServingConfig {
    fn default() -> Self {
        Self { k: 20, threshold: -1.0, target_precision: 0.1, days: 1 }
    }
}

/// Complete configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub samples: SampleConfig,
    pub post_encoder: PostEncoderConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub backfill: BackfillPolicy,
    pub serving: ServingConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config(format!("config json: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.backfill.validate(self.encoder.l_max)?;
        if self.samples.horizon == 0 || self.samples.holdout_days == 0 || self.samples.stride == 0 {
            return Err(config("horizon, holdout_days and stride must be positive"));
        }
        Ok(())
    }
}
