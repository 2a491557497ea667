//! Causal transformer user tower.
//!
//! Input tokens are pre-trained post embeddings (concatenated with a
//! relative-time scalar and projected to `d_model`) plus learned position,
//! action and surface embeddings. An optional learned CLS token sits at
//! position 0. Blocks are post-norm: `LN(x + MHA(x))` then `LN(x + FFN(x))`.
//!
//! Forward passes keep every intermediate needed by [`ModelParams::backward`],
//! which accumulates exact gradients into a flat buffer sharing the
//! parameter [`Layout`].

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, axpy, dot, matmul, matmul_a_bt_acc, matmul_at_b_acc};
use crate::params::{Init, Layout, TensorId};
use crate::sequence::{EmbeddingLookup, SequenceSample, ACTION_SLOTS, NULL_ACTION, NULL_SURFACE, SURFACE_SLOTS};

const LN_EPS: f64 = 1e-5;
const TABLE_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Last,
    Mean,
    Sum,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Maximum history length, excluding CLS.
    pub l_max: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub d_ff: usize,
    /// Dimension of the post embeddings consumed and produced.
    pub d_emb: usize,
    pub causal: bool,
    pub use_cls: bool,
    pub use_rel_time: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            l_max: 32,
            dropout: 0.2,
            pooling: Pooling::Last,
            d_ff: 128,
            d_emb: 16,
            causal: true,
            use_cls: true,
            use_rel_time: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(invalid("d_model must be a positive multiple of heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must lie in [0, 1)"));
        }
        if self.layers == 0 || self.l_max == 0 || self.d_ff == 0 || self.d_emb == 0 {
            return Err(invalid("layers, l_max, d_ff and d_emb must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Number of tokens for a history of `n` events.
    pub fn seq_len(&self, n: usize) -> usize {
        n.min(self.l_max) + usize::from(self.use_cls)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub ln1_g: TensorId,
    pub ln1_b: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub ln2_g: TensorId,
    pub ln2_b: TensorId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerLayout {
    pub layout: Layout,
    pub position: TensorId,
    pub action: TensorId,
    pub surface: TensorId,
    pub cls: TensorId,
    pub time_w: TensorId,
    pub time_b: TensorId,
    pub layers: Vec<LayerIds>,
    pub pool: Option<(TensorId, TensorId)>,
    pub out_w: TensorId,
}

impl TowerLayout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        let mut l = Layout::new();
        let position = l.push("position_table", cfg.l_max + 1, d, Init::Normal(TABLE_STD));
        let action = l.push("action_table", ACTION_SLOTS, d, Init::Normal(TABLE_STD));
        let surface = l.push("surface_table", SURFACE_SLOTS, d, Init::Normal(TABLE_STD));
        let cls = l.push("cls_vector", 1, d, Init::Normal(TABLE_STD));
        let time_w = l.push("time_proj.weight", cfg.d_emb + 1, d, Init::Xavier);
        let time_b = l.push("time_proj.bias", 1, d, Init::Constant(0.0));
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut p = |name: &str, r, c, init| l.push(alloc::format!("layer{i}.{name}"), r, c, init);
                LayerIds {
                    wq: p("w_q", d, d, Init::Xavier),
                    wk: p("w_k", d, d, Init::Xavier),
                    wv: p("w_v", d, d, Init::Xavier),
                    wo: p("w_o", d, d, Init::Xavier),
                    ln1_g: p("ln1.scale", 1, d, Init::Constant(1.0)),
                    ln1_b: p("ln1.offset", 1, d, Init::Constant(0.0)),
                    w1: p("ffn.w1", d, cfg.d_ff, Init::Xavier),
                    b1: p("ffn.b1", 1, cfg.d_ff, Init::Constant(0.0)),
                    w2: p("ffn.w2", cfg.d_ff, d, Init::Xavier),
                    b2: p("ffn.b2", 1, d, Init::Constant(0.0)),
                    ln2_g: p("ln2.scale", 1, d, Init::Constant(1.0)),
                    ln2_b: p("ln2.offset", 1, d, Init::Constant(0.0)),
                }
            })
            .collect();
        let pool = (cfg.pooling == Pooling::Attention).then(|| {
            (
                l.push("attention_pool.weight", d, 1, Init::Xavier),
                l.push("attention_pool.bias", 1, 1, Init::Constant(0.0)),
            )
        });
        let out_w = l.push("output_proj.weight", d, cfg.d_emb, Init::Xavier);
        Self { layout: l, position, action, surface, cls, time_w, time_b, layers, pool, out_w }
    }
}

/// The assembled token sequence for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    pub has_cls: bool,
    /// Per history token: `[post embedding ‖ rel_time]`, `d_emb + 1` wide.
    pub features: Vec<f64>,
    pub position_ids: Vec<usize>,
    pub action_ids: Vec<usize>,
    pub surface_ids: Vec<usize>,
    /// `ln(1 + Δseconds)` to the cutoff; zero for CLS or when the feature is disabled.
    pub rel_time: Vec<f64>,
    /// `len × d_model` token vectors fed to the first block.
    pub tokens: Vec<f64>,
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }

    fn history_offset(&self) -> usize {
        usize::from(self.has_cls)
    }
}

/// Allowed-attention pattern: `allowed(t, j) ⇔ j ≤ t`, row-major `l×l`.
pub fn causal_mask(l: usize) -> Vec<bool> {
    let mut m = vec![false; l * l];
    for t in 0..l {
        for j in 0..=t {
            m[t * l + j] = true;
        }
    }
    m
}

fn full_mask(l: usize) -> Vec<bool> {
    vec![true; l * l]
}

/// Weights of one attention block, borrowed from a flat buffer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
}

#[derive(Debug, Clone, Default)]
struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × l × l`, zero on masked cells.
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

fn attention_forward(x: &[f64], l: usize, d: usize, heads: usize, w: AttentionWeights<'_>, mask: &[bool]) -> (Vec<f64>, AttnCache) {
    let dk = d / heads;
    let scale = 1.0 / libm::sqrt(dk as f64);
    let mut q = vec![0.0; l * d];
    let mut k = vec![0.0; l * d];
    let mut v = vec![0.0; l * d];
    matmul(x, w.wq, l, d, d, &mut q);
    matmul(x, w.wk, l, d, d, &mut k);
    matmul(x, w.wv, l, d, d, &mut v);
    let mut probs = vec![0.0; heads * l * l];
    let mut ctx = vec![0.0; l * d];
    let mut scores = vec![0.0; l];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for t in 0..l {
            let qt = &q[t * d..][cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..l {
                if mask[t * l + j] {
                    let s = dot(qt, &k[j * d..][cols.clone()]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
            }
            let mut sum = 0.0;
            for j in 0..l {
                if mask[t * l + j] {
                    let e = libm::exp(scores[j] - max);
                    scores[j] = e;
                    sum += e;
                }
            }
            let prow = &mut probs[(h * l + t) * l..(h * l + t + 1) * l];
            let crow = &mut ctx[t * d..][cols.clone()];
            for j in 0..l {
                if mask[t * l + j] {
                    let p = scores[j] / sum;
                    prow[j] = p;
                    axpy(p, &v[j * d..][cols.clone()], crow);
                }
            }
        }
    }
    let mut out = vec![0.0; l * d];
    matmul(&ctx, w.wo, l, d, d, &mut out);
    (out, AttnCache { q, k, v, probs, ctx })
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    x: &[f64],
    l: usize,
    d: usize,
    heads: usize,
    w: AttentionWeights<'_>,
    mask: &[bool],
    cache: &AttnCache,
    d_out: &[f64],
    g_wq: &mut [f64],
    g_wk: &mut [f64],
    g_wv: &mut [f64],
    g_wo: &mut [f64],
    dx: &mut [f64],
) {
    let dk = d / heads;
    let scale = 1.0 / libm::sqrt(dk as f64);
    matmul_at_b_acc(&cache.ctx, d_out, l, d, d, g_wo);
    let mut d_ctx = vec![0.0; l * d];
    matmul_a_bt_acc(d_out, w.wo, l, d, d, &mut d_ctx);

    let mut dq = vec![0.0; l * d];
    let mut dkm = vec![0.0; l * d];
    let mut dv = vec![0.0; l * d];
    let mut dp = vec![0.0; l];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for t in 0..l {
            let prow = &cache.probs[(h * l + t) * l..(h * l + t + 1) * l];
            let dct = &d_ctx[t * d..][cols.clone()];
            let mut weighted = 0.0;
            for j in 0..l {
                if mask[t * l + j] {
                    dp[j] = dot(dct, &cache.v[j * d..][cols.clone()]);
                    weighted += prow[j] * dp[j];
                    axpy(prow[j], dct, &mut dv[j * d..][cols.clone()]);
                }
            }
            let qt: Vec<f64> = cache.q[t * d..][cols.clone()].to_vec();
            for j in 0..l {
                if mask[t * l + j] {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds != 0.0 {
                        axpy(ds, &cache.k[j * d..][cols.clone()], &mut dq[t * d..][cols.clone()]);
                        axpy(ds, &qt, &mut dkm[j * d..][cols.clone()]);
                    }
                }
            }
        }
    }
    matmul_at_b_acc(x, &dq, l, d, d, g_wq);
    matmul_at_b_acc(x, &dkm, l, d, d, g_wk);
    matmul_at_b_acc(x, &dv, l, d, d, g_wv);
    matmul_a_bt_acc(&dq, w.wq, l, d, d, dx);
    matmul_a_bt_acc(&dkm, w.wk, l, d, d, dx);
    matmul_a_bt_acc(&dv, w.wv, l, d, d, dx);
}

/// Multi-head scaled dot-product attention over an `l×d` input.
///
/// `mask[t*l + j]` allows position `t` to attend to `j`; every row must
/// allow at least one position. Masked cells are excluded from the softmax.
pub fn multi_head_attention(x: &[f64], l: usize, d: usize, heads: usize, w: AttentionWeights<'_>, mask: &[bool]) -> Vec<f64> {
    attention_forward(x, l, d, heads, w, mask).0
}

/// `max(0, x W1 + b1) W2 + b2`, applied row by row to an `l×d` input.
pub fn position_ffn(x: &[f64], l: usize, d: usize, d_ff: usize, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Vec<f64> {
    ffn_forward(x, l, d, d_ff, w1, b1, w2, b2).0
}

#[allow(clippy::too_many_arguments)]
fn ffn_forward(x: &[f64], l: usize, d: usize, d_ff: usize, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut h = vec![0.0; l * d_ff];
    matmul(x, w1, l, d, d_ff, &mut h);
    for row in h.chunks_exact_mut(d_ff) {
        for (v, &b) in row.iter_mut().zip(b1) {
            *v = (*v + b).max(0.0);
        }
    }
    let mut out = vec![0.0; l * d];
    matmul(&h, w2, l, d_ff, d, &mut out);
    for row in out.chunks_exact_mut(d) {
        axpy(1.0, b2, row);
    }
    (out, h)
}

#[derive(Debug, Clone, Default)]
struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm_forward(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let l = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; l];
    for t in 0..l {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / libm::sqrt(var + LN_EPS);
        inv_std[t] = is;
        for i in 0..d {
            let xh = (row[i] - mean) * is;
            xhat[t * d + i] = xh;
            y[t * d + i] = g[i] * xh + b[i];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &[f64], d: usize, g: &[f64], cache: &LnCache, dg: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let l = dy.len() / d;
    let n = d as f64;
    let mut dxhat = vec![0.0; d];
    for t in 0..l {
        let dyr = &dy[t * d..(t + 1) * d];
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let mut sum = 0.0;
        let mut sum_xh = 0.0;
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            sum += dxhat[i];
            sum_xh += dxhat[i] * xh[i];
        }
        let is = cache.inv_std[t];
        for i in 0..d {
            dx[t * d + i] += is / n * (n * dxhat[i] - sum - xh[i] * sum_xh);
        }
    }
}

/// Inverted dropout: returns per-element multipliers (0 or `1/(1-p)`).
fn dropout_mask(len: usize, p: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, &s) in x.iter_mut().zip(m) {
            *v *= s;
        }
    }
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    x: Vec<f64>,
    attn: AttnCache,
    drop_attn: Option<Vec<f64>>,
    ln1: LnCache,
    x1: Vec<f64>,
    h: Vec<f64>,
    drop_ffn: Option<Vec<f64>>,
    ln2: LnCache,
}

/// Everything computed by a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub len: usize,
    /// Final hidden states, `len × d_model`.
    pub hidden: Vec<f64>,
    pub pooled: Vec<f64>,
    /// Normalized user representation, `d_emb` wide.
    pub user_vec: Vec<f64>,
    user_norm: f64,
    /// Normalized per-position projections, `len × d_emb`.
    pub position_vecs: Vec<f64>,
    position_norms: Vec<f64>,
    pool_weights: Vec<f64>,
    drop_input: Option<Vec<f64>>,
    mask: Vec<bool>,
    layers: Vec<LayerCache>,
}

/// Learnable user-tower parameters together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub ids: TowerLayout,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ids = TowerLayout::new(&config);
        let mut values = ids.layout.initialize(rng);
        // Time row starts at zero.
        let time_w = ids.time_w;
        let row = time_w.rows - 1;
        time_w.of_mut(&mut values)[row * time_w.cols..].fill(0.0);
        Ok(Self { config, ids, values })
    }

    /// Builds parameters from an existing flat vector.
    pub fn from_values(config: EncoderConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let ids = TowerLayout::new(&config);
        crate::error::check_dim(ids.layout.total(), values.len())?;
        Ok(Self { config, ids, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.ids.layout
    }

    fn p(&self, id: TensorId) -> &[f64] {
        id.of(&self.values)
    }

    pub fn attention_weights(&self, layer: usize) -> AttentionWeights<'_> {
        let ids = &self.ids.layers[layer];
        AttentionWeights { wq: self.p(ids.wq), wk: self.p(ids.wk), wv: self.p(ids.wv), wo: self.p(ids.wo) }
    }

    /// Builds the token sequence for `sample`, keeping its most recent
    /// `l_max` events.
    pub fn assemble_input(&self, sample: &SequenceSample, embeddings: &dyn EmbeddingLookup) -> Result<SequenceInput> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let de = cfg.d_emb;
        let start = sample.history.len().saturating_sub(cfg.l_max);
        let history = &sample.history[start..];
        if history.is_empty() && !cfg.use_cls {
            return Err(Error::Empty("history (model has no CLS token)"));
        }
        let off = usize::from(cfg.use_cls);
        let len = history.len() + off;
        let mut input = SequenceInput {
            has_cls: cfg.use_cls,
            features: Vec::with_capacity(history.len() * (de + 1)),
            position_ids: (0..len).collect(),
            action_ids: Vec::with_capacity(len),
            surface_ids: Vec::with_capacity(len),
            rel_time: Vec::with_capacity(len),
            tokens: vec![0.0; len * d],
        };
        if cfg.use_cls {
            input.action_ids.push(NULL_ACTION);
            input.surface_ids.push(NULL_SURFACE);
            input.rel_time.push(0.0);
            let row = &mut input.tokens[..d];
            row.copy_from_slice(self.p(self.ids.cls));
            axpy(1.0, self.ids.position.row(&self.values, 0), row);
        }
        for ev in history {
            let emb = embeddings.get(ev.post_id).ok_or(Error::MissingEmbedding(ev.post_id))?;
            crate::error::check_dim(de, emb.len())?;
            let rel = if cfg.use_rel_time {
                let delta = (sample.cutoff_time - ev.timestamp).max(0) as f64;
                libm::log1p(delta)
            } else {
                0.0
            };
            input.features.extend_from_slice(emb);
            input.features.push(rel);
            input.action_ids.push(ev.action.index());
            input.surface_ids.push(ev.surface.index());
            input.rel_time.push(rel);
        }
        let n = history.len();
        let mut proj = vec![0.0; n * d];
        matmul(&input.features, self.p(self.ids.time_w), n, de + 1, d, &mut proj);
        for i in 0..n {
            let t = i + off;
            let row = &mut input.tokens[t * d..(t + 1) * d];
            row.copy_from_slice(&proj[i * d..(i + 1) * d]);
            axpy(1.0, self.p(self.ids.time_b), row);
            axpy(1.0, self.ids.position.row(&self.values, t), row);
            axpy(1.0, self.ids.action.row(&self.values, input.action_ids[t]), row);
            axpy(1.0, self.ids.surface.row(&self.values, input.surface_ids[t]), row);
        }
        Ok(input)
    }

    fn attention_mask(&self, l: usize) -> Vec<bool> {
        if self.config.causal {
            causal_mask(l)
        } else {
            full_mask(l)
        }
    }

    /// Runs the encoder. Dropout is active only when `rng` is given.
    pub fn forward(&self, input: &SequenceInput, mut rng: Option<&mut dyn RngCore>) -> Forward {
        let cfg = &self.config;
        let d = cfg.d_model;
        let l = input.len();
        let p = cfg.dropout;
        let mask = self.attention_mask(l);
        let mut drop = |len: usize| -> Option<Vec<f64>> {
            match rng.as_deref_mut() {
                Some(r) if p > 0.0 => Some(dropout_mask(len, p, r)),
                _ => None,
            }
        };

        let mut x = input.tokens.clone();
        let drop_input = drop(x.len());
        apply_mask(&mut x, &drop_input);

        let mut layers = Vec::with_capacity(cfg.layers);
        for ids in &self.ids.layers {
            let w = AttentionWeights { wq: self.p(ids.wq), wk: self.p(ids.wk), wv: self.p(ids.wv), wo: self.p(ids.wo) };
            let (mut a, attn) = attention_forward(&x, l, d, cfg.heads, w, &mask);
            let drop_attn = drop(a.len());
            apply_mask(&mut a, &drop_attn);
            axpy(1.0, &x, &mut a);
            let (x1, ln1) = layer_norm_forward(&a, d, self.p(ids.ln1_g), self.p(ids.ln1_b));
            let (mut f, h) = ffn_forward(&x1, l, d, cfg.d_ff, self.p(ids.w1), self.p(ids.b1), self.p(ids.w2), self.p(ids.b2));
            let drop_ffn = drop(f.len());
            apply_mask(&mut f, &drop_ffn);
            axpy(1.0, &x1, &mut f);
            let (x2, ln2) = layer_norm_forward(&f, d, self.p(ids.ln2_g), self.p(ids.ln2_b));
            layers.push(LayerCache { x, attn, drop_attn, ln1, x1, h, drop_ffn, ln2 });
            x = x2;
        }
        let hidden = x;

        let (pooled, pool_weights) = self.pool(&hidden, l);
        let de = cfg.d_emb;
        let mut user_vec = vec![0.0; de];
        matmul(&pooled, self.p(self.ids.out_w), 1, d, de, &mut user_vec);
        let user_norm = linalg::normalize(&mut user_vec);

        let mut position_vecs = vec![0.0; l * de];
        matmul(&hidden, self.p(self.ids.out_w), l, d, de, &mut position_vecs);
        let position_norms = position_vecs.chunks_exact_mut(de).map(linalg::normalize).collect();

        Forward {
            len: l,
            hidden,
            pooled,
            user_vec,
            user_norm,
            position_vecs,
            position_norms,
            pool_weights,
            drop_input,
            mask,
            layers,
        }
    }

    /// Pools `l×d_model` hidden states into one vector. Returns the pooled
    /// vector and the attention-pool weights (empty for other modes).
    pub fn pool(&self, hidden: &[f64], l: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.config.d_model;
        let mut pooled = vec![0.0; d];
        let mut weights = Vec::new();
        match self.config.pooling {
            Pooling::Last => pooled.copy_from_slice(&hidden[(l - 1) * d..l * d]),
            Pooling::Sum | Pooling::Mean => {
                linalg::column_sums_acc(hidden, d, &mut pooled);
                if self.config.pooling == Pooling::Mean {
                    pooled.iter_mut().for_each(|v| *v /= l as f64);
                }
            }
            Pooling::Attention => {
                let (pw, pb) = self.ids.pool.expect("attention pooling parameters");
                let pw = self.p(pw);
                let pb = self.p(pb)[0];
                weights = hidden.chunks_exact(d).map(|h| dot(h, pw) + pb).collect();
                linalg::softmax(&mut weights);
                for (h, &w) in hidden.chunks_exact(d).zip(&weights) {
                    axpy(w, h, &mut pooled);
                }
            }
        }
        (pooled, weights)
    }

    /// Encodes a sample in eval mode and returns `(hidden, user_vec)`.
    pub fn encode_sequence(&self, sample: &SequenceSample, embeddings: &dyn EmbeddingLookup) -> Result<(Vec<f64>, Vec<f64>)> {
        let input = self.assemble_input(sample, embeddings)?;
        let fwd = self.forward(&input, None);
        Ok((fwd.hidden, fwd.user_vec))
    }

    /// Accumulates parameter gradients into `grads` given the gradient of
    /// the loss with respect to the normalized user vector and, optionally,
    /// the normalized per-position projections (`len × d_emb`).
    pub fn backward(&self, input: &SequenceInput, fwd: &Forward, d_user_vec: &[f64], d_positions: Option<&[f64]>, grads: &mut [f64]) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let de = cfg.d_emb;
        let l = fwd.len;
        let ids = &self.ids;
        let out_w = self.p(ids.out_w);

        let mut d_hidden = vec![0.0; l * d];

        // User vector through normalization, output projection and pooling.
        let mut d_user_raw = vec![0.0; de];
        linalg::normalize_backward(&fwd.user_vec, fwd.user_norm, d_user_vec, &mut d_user_raw);
        matmul_at_b_acc(&fwd.pooled, &d_user_raw, 1, d, de, ids.out_w.of_mut(grads));
        let mut d_pooled = vec![0.0; d];
        matmul_a_bt_acc(&d_user_raw, out_w, 1, de, d, &mut d_pooled);
        match cfg.pooling {
            Pooling::Last => axpy(1.0, &d_pooled, &mut d_hidden[(l - 1) * d..]),
            Pooling::Sum | Pooling::Mean => {
                let s = if cfg.pooling == Pooling::Mean { 1.0 / l as f64 } else { 1.0 };
                for row in d_hidden.chunks_exact_mut(d) {
                    axpy(s, &d_pooled, row);
                }
            }
            Pooling::Attention => {
                let (pw_id, pb_id) = ids.pool.expect("attention pooling parameters");
                let pw = self.p(pw_id);
                let w = &fwd.pool_weights;
                let dw: Vec<f64> = fwd.hidden.chunks_exact(d).map(|h| dot(h, &d_pooled)).collect();
                let avg = dot(w, &dw);
                for t in 0..l {
                    let ds = w[t] * (dw[t] - avg);
                    let h = &fwd.hidden[t * d..(t + 1) * d];
                    axpy(ds, h, pw_id.of_mut(grads));
                    pb_id.of_mut(grads)[0] += ds;
                    let dh = &mut d_hidden[t * d..(t + 1) * d];
                    axpy(w[t], &d_pooled, dh);
                    axpy(ds, pw, dh);
                }
            }
        }

        if let Some(dp) = d_positions {
            let mut d_raw = vec![0.0; l * de];
            for t in 0..l {
                let g = &dp[t * de..(t + 1) * de];
                if g.iter().any(|v| *v != 0.0) {
                    linalg::normalize_backward(
                        &fwd.position_vecs[t * de..(t + 1) * de],
                        fwd.position_norms[t],
                        g,
                        &mut d_raw[t * de..(t + 1) * de],
                    );
                }
            }
            matmul_at_b_acc(&fwd.hidden, &d_raw, l, d, de, ids.out_w.of_mut(grads));
            matmul_a_bt_acc(&d_raw, out_w, l, de, d, &mut d_hidden);
        }

        let mut dx = d_hidden;
        for (li, cache) in fwd.layers.iter().enumerate().rev() {
            let lid = &ids.layers[li];
            // Second sublayer: x2 = LN2(x1 + drop(FFN(x1))).
            let mut dr2 = vec![0.0; l * d];
            {
                let (dg, db) = two_mut(grads, lid.ln2_g, lid.ln2_b);
                layer_norm_backward(&dx, d, self.p(lid.ln2_g), &cache.ln2, dg, db, &mut dr2);
            }
            let mut dx1 = dr2.clone();
            let mut df = dr2;
            apply_mask(&mut df, &cache.drop_ffn);
            matmul_at_b_acc(&cache.h, &df, l, cfg.d_ff, d, lid.w2.of_mut(grads));
            linalg::column_sums_acc(&df, d, lid.b2.of_mut(grads));
            let mut dh = vec![0.0; l * cfg.d_ff];
            matmul_a_bt_acc(&df, self.p(lid.w2), l, d, cfg.d_ff, &mut dh);
            for (g, &h) in dh.iter_mut().zip(&cache.h) {
                if h <= 0.0 {
                    *g = 0.0;
                }
            }
            matmul_at_b_acc(&cache.x1, &dh, l, d, cfg.d_ff, lid.w1.of_mut(grads));
            linalg::column_sums_acc(&dh, cfg.d_ff, lid.b1.of_mut(grads));
            matmul_a_bt_acc(&dh, self.p(lid.w1), l, cfg.d_ff, d, &mut dx1);

            // First sublayer: x1 = LN1(x + drop(MHA(x))).
            let mut dr1 = vec![0.0; l * d];
            {
                let (dg, db) = two_mut(grads, lid.ln1_g, lid.ln1_b);
                layer_norm_backward(&dx1, d, self.p(lid.ln1_g), &cache.ln1, dg, db, &mut dr1);
            }
            let mut dxin = dr1.clone();
            let mut da = dr1;
            apply_mask(&mut da, &cache.drop_attn);
            let w = self.attention_weights(li);
            let mut g_wq = vec![0.0; d * d];
            let mut g_wk = vec![0.0; d * d];
            let mut g_wv = vec![0.0; d * d];
            let mut g_wo = vec![0.0; d * d];
            attention_backward(
                &cache.x, l, d, cfg.heads, w, &fwd.mask, &cache.attn, &da, &mut g_wq, &mut g_wk, &mut g_wv, &mut g_wo, &mut dxin,
            );
            axpy(1.0, &g_wq, lid.wq.of_mut(grads));
            axpy(1.0, &g_wk, lid.wk.of_mut(grads));
            axpy(1.0, &g_wv, lid.wv.of_mut(grads));
            axpy(1.0, &g_wo, lid.wo.of_mut(grads));
            dx = dxin;
        }

        apply_mask(&mut dx, &fwd.drop_input);
        self.input_backward(input, &dx, grads);
    }

    fn input_backward(&self, input: &SequenceInput, d_tokens: &[f64], grads: &mut [f64]) {
        let d = self.config.d_model;
        let de1 = self.config.d_emb + 1;
        let ids = &self.ids;
        let off = input.history_offset();
        if input.has_cls {
            let g = &d_tokens[..d];
            axpy(1.0, g, ids.cls.of_mut(grads));
            axpy(1.0, g, ids.position.row_mut(grads, 0));
        }
        let n = input.len() - off;
        if n == 0 {
            return;
        }
        let dh = &d_tokens[off * d..];
        matmul_at_b_acc(&input.features, dh, n, de1, d, ids.time_w.of_mut(grads));
        linalg::column_sums_acc(dh, d, ids.time_b.of_mut(grads));
        for i in 0..n {
            let t = i + off;
            let g = &d_tokens[t * d..(t + 1) * d];
            axpy(1.0, g, ids.position.row_mut(grads, input.position_ids[t]));
            axpy(1.0, g, ids.action.row_mut(grads, input.action_ids[t]));
            axpy(1.0, g, ids.surface.row_mut(grads, input.surface_ids[t]));
        }
    }
}

/// Disjoint mutable views of two tensors in one buffer.
fn two_mut(buf: &mut [f64], a: TensorId, b: TensorId) -> (&mut [f64], &mut [f64]) {
    assert!(a.offset + a.len() <= b.offset, "tensors must be ordered and disjoint");
    let (lo, hi) = buf.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len()])
}
