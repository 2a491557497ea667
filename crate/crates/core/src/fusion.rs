//! Multi-channel post tower.
//!
//! A post has a text channel, a variable-size set of image vectors and a
//! one-hot attribute channel. Images pass through a shared two-layer MLP and
//! are mean-pooled (deep sets); the three channel representations are then
//! mixed with softmax weights predicted from their concatenation, projected
//! to the output dimension and L2-normalized.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::linalg::{self, axpy, dot, matmul, matmul_a_bt_acc, matmul_at_b_acc};
use crate::params::{Init, Layout, TensorId};

/// Number of fused channels: text, images, attributes.
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostTowerConfig {
    /// Width of raw text and image channel vectors.
    pub channel_dim: usize,
    /// Width of the attribute one-hot channel.
    pub attr_dim: usize,
    pub image_hidden: usize,
    pub fuse_dim: usize,
    pub out_dim: usize,
    pub max_images: usize,
}

impl Default for PostTowerConfig {
    fn default() -> Self {
        Self { channel_dim: 32, attr_dim: 8, image_hidden: 32, fuse_dim: 32, out_dim: 16, max_images: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostFeatures {
    pub text: Vec<f64>,
    pub images: Vec<Vec<f64>>,
    pub attrs: Vec<f64>,
}

/// A shared two-layer map `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct SharedMlp<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl SharedMlp<'_> {
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = vec![0.0; self.hidden];
        matmul(x, self.w1, 1, self.in_dim, self.hidden, &mut h);
        for (v, &b) in h.iter_mut().zip(self.b1) {
            *v = (*v + b).max(0.0);
        }
        let mut o = vec![0.0; self.out_dim];
        matmul(&h, self.w2, 1, self.hidden, self.out_dim, &mut o);
        axpy(1.0, self.b2, &mut o);
        (o, h)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).0
    }
}

/// Mean of `mlp(x)` over the set; the zero vector for an empty set.
pub fn deep_sets_fuse(images: &[Vec<f64>], mlp: &SharedMlp<'_>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; mlp.out_dim];
    for img in images {
        check_dim(mlp.in_dim, img.len())?;
        axpy(1.0, &mlp.apply(img), &mut out);
    }
    if !images.is_empty() {
        out.iter_mut().for_each(|v| *v /= images.len() as f64);
    }
    Ok(out)
}

/// `w = softmax(concat(φ) · proj_w + proj_b)`, `f = Σ wᵢ φᵢ`.
///
/// `channels` holds `N` vectors of equal width `dim`; `proj_w` is
/// `(N·dim) × N`. Returns `(f, w)`.
pub fn attention_fuse(channels: &[Vec<f64>], proj_w: &[f64], proj_b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = channels.len();
    if n == 0 {
        return Err(crate::error::Error::Empty("channel set"));
    }
    let dim = channels[0].len();
    for c in channels {
        check_dim(dim, c.len())?;
    }
    check_dim(n * dim * n, proj_w.len())?;
    check_dim(n, proj_b.len())?;
    let concat: Vec<f64> = channels.iter().flatten().copied().collect();
    let mut w = proj_b.to_vec();
    let mut z = vec![0.0; n];
    matmul(&concat, proj_w, 1, n * dim, n, &mut z);
    axpy(1.0, &z, &mut w);
    linalg::softmax(&mut w);
    let mut f = vec![0.0; dim];
    for (c, &wi) in channels.iter().zip(&w) {
        axpy(wi, c, &mut f);
    }
    Ok((f, w))
}

#[derive(Debug, Clone, PartialEq)]
struct TowerIds {
    text_w: TensorId,
    text_b: TensorId,
    img_w1: TensorId,
    img_b1: TensorId,
    img_w2: TensorId,
    img_b2: TensorId,
    attr_w: TensorId,
    attr_b: TensorId,
    fuse_w: TensorId,
    fuse_b: TensorId,
    out_w: TensorId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostTower {
    pub config: PostTowerConfig,
    layout: Layout,
    ids: TowerIds,
    pub values: Vec<f64>,
}

/// Cached intermediates of one post encoding.
#[derive(Debug, Clone)]
pub struct PostForward {
    channels: Vec<Vec<f64>>,
    image_hidden: Vec<Vec<f64>>,
    weights: Vec<f64>,
    fused: Vec<f64>,
    norm: f64,
    pub embedding: Vec<f64>,
}

impl PostForward {
    /// Softmax channel weights.
    pub fn channel_weights(&self) -> &[f64] {
        &self.weights
    }
}

impl PostTower {
    fn build(cfg: &PostTowerConfig) -> (Layout, TowerIds) {
        let c = cfg.channel_dim;
        let f = cfg.fuse_dim;
        let mut l = Layout::new();
        let ids = TowerIds {
            text_w: l.push("text_proj.weight", c, f, Init::Xavier),
            text_b: l.push("text_proj.bias", 1, f, Init::Constant(0.0)),
            img_w1: l.push("image_mlp.w1", c, cfg.image_hidden, Init::Xavier),
            img_b1: l.push("image_mlp.b1", 1, cfg.image_hidden, Init::Constant(0.0)),
            img_w2: l.push("image_mlp.w2", cfg.image_hidden, f, Init::Xavier),
            img_b2: l.push("image_mlp.b2", 1, f, Init::Constant(0.0)),
            attr_w: l.push("attr_proj.weight", cfg.attr_dim, f, Init::Xavier),
            attr_b: l.push("attr_proj.bias", 1, f, Init::Constant(0.0)),
            fuse_w: l.push("fusion.weight", CHANNELS * f, CHANNELS, Init::Xavier),
            fuse_b: l.push("fusion.bias", 1, CHANNELS, Init::Constant(0.0)),
            out_w: l.push("output_proj.weight", f, cfg.out_dim, Init::Xavier),
        };
        (l, ids)
    }

    pub fn new<R: Rng + ?Sized>(config: PostTowerConfig, rng: &mut R) -> Result<Self> {
        if config.channel_dim == 0 || config.fuse_dim == 0 || config.out_dim == 0 || config.image_hidden == 0 {
            return Err(invalid("post tower dimensions must be positive"));
        }
        let (layout, ids) = Self::build(&config);
        let values = layout.initialize(rng);
        Ok(Self { config, layout, ids, values })
    }

    pub fn from_values(config: PostTowerConfig, values: Vec<f64>) -> Result<Self> {
        let (layout, ids) = Self::build(&config);
        check_dim(layout.total(), values.len())?;
        Ok(Self { config, layout, ids, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn image_mlp(&self) -> SharedMlp<'_> {
        SharedMlp {
            w1: self.ids.img_w1.of(&self.values),
            b1: self.ids.img_b1.of(&self.values),
            w2: self.ids.img_w2.of(&self.values),
            b2: self.ids.img_b2.of(&self.values),
            in_dim: self.config.channel_dim,
            hidden: self.config.image_hidden,
            out_dim: self.config.fuse_dim,
        }
    }

    fn linear(&self, x: &[f64], w: TensorId, b: TensorId) -> Vec<f64> {
        let mut out = b.of(&self.values).to_vec();
        let mut z = vec![0.0; w.cols];
        matmul(x, w.of(&self.values), 1, w.rows, w.cols, &mut z);
        axpy(1.0, &z, &mut out);
        out
    }

    pub fn forward(&self, post: &PostFeatures) -> Result<PostForward> {
        let cfg = &self.config;
        check_dim(cfg.channel_dim, post.text.len())?;
        check_dim(cfg.attr_dim, post.attrs.len())?;
        if post.images.len() > cfg.max_images {
            return Err(invalid("too many images"));
        }
        let text = self.linear(&post.text, self.ids.text_w, self.ids.text_b);
        let mlp = self.image_mlp();
        let mut image = vec![0.0; cfg.fuse_dim];
        let mut image_hidden = Vec::with_capacity(post.images.len());
        for img in &post.images {
            check_dim(cfg.channel_dim, img.len())?;
            let (o, h) = mlp.forward(img);
            axpy(1.0 / post.images.len() as f64, &o, &mut image);
            image_hidden.push(h);
        }
        let attrs = self.linear(&post.attrs, self.ids.attr_w, self.ids.attr_b);
        let channels = vec![text, image, attrs];
        let (fused, weights) = attention_fuse(&channels, self.ids.fuse_w.of(&self.values), self.ids.fuse_b.of(&self.values))?;
        let mut embedding = vec![0.0; cfg.out_dim];
        matmul(&fused, self.ids.out_w.of(&self.values), 1, cfg.fuse_dim, cfg.out_dim, &mut embedding);
        let norm = linalg::normalize(&mut embedding);
        Ok(PostForward { channels, image_hidden, weights, fused, norm, embedding })
    }

    pub fn encode(&self, post: &PostFeatures) -> Result<Vec<f64>> {
        self.forward(post).map(|f| f.embedding)
    }

    /// Accumulates gradients given `∂loss/∂embedding`.
    pub fn backward(&self, post: &PostFeatures, fwd: &PostForward, d_embedding: &[f64], grads: &mut [f64]) {
        let cfg = &self.config;
        let fd = cfg.fuse_dim;
        let ids = &self.ids;
        let mut d_raw = vec![0.0; cfg.out_dim];
        linalg::normalize_backward(&fwd.embedding, fwd.norm, d_embedding, &mut d_raw);
        matmul_at_b_acc(&fwd.fused, &d_raw, 1, fd, cfg.out_dim, ids.out_w.of_mut(grads));
        let mut d_fused = vec![0.0; fd];
        matmul_a_bt_acc(&d_raw, ids.out_w.of(&self.values), 1, cfg.out_dim, fd, &mut d_fused);

        let w = &fwd.weights;
        let mut d_ch: Vec<Vec<f64>> = w.iter().map(|&wi| d_fused.iter().map(|g| g * wi).collect()).collect();
        let dw: Vec<f64> = fwd.channels.iter().map(|c| dot(c, &d_fused)).collect();
        let avg = dot(w, &dw);
        let d_logit: Vec<f64> = w.iter().zip(&dw).map(|(wi, dwi)| wi * (dwi - avg)).collect();
        let concat: Vec<f64> = fwd.channels.iter().flatten().copied().collect();
        matmul_at_b_acc(&concat, &d_logit, 1, CHANNELS * fd, CHANNELS, ids.fuse_w.of_mut(grads));
        axpy(1.0, &d_logit, ids.fuse_b.of_mut(grads));
        let mut d_concat = vec![0.0; CHANNELS * fd];
        matmul_a_bt_acc(&d_logit, ids.fuse_w.of(&self.values), 1, CHANNELS, CHANNELS * fd, &mut d_concat);
        for (i, dc) in d_ch.iter_mut().enumerate() {
            axpy(1.0, &d_concat[i * fd..(i + 1) * fd], dc);
        }

        matmul_at_b_acc(&post.text, &d_ch[0], 1, cfg.channel_dim, fd, ids.text_w.of_mut(grads));
        axpy(1.0, &d_ch[0], ids.text_b.of_mut(grads));
        matmul_at_b_acc(&post.attrs, &d_ch[2], 1, cfg.attr_dim, fd, ids.attr_w.of_mut(grads));
        axpy(1.0, &d_ch[2], ids.attr_b.of_mut(grads));

        let n = post.images.len();
        if n > 0 {
            let d_out: Vec<f64> = d_ch[1].iter().map(|g| g / n as f64).collect();
            let hd = cfg.image_hidden;
            for (img, h) in post.images.iter().zip(&fwd.image_hidden) {
                axpy(1.0, &d_out, ids.img_b2.of_mut(grads));
                matmul_at_b_acc(h, &d_out, 1, hd, fd, ids.img_w2.of_mut(grads));
                let mut dh = vec![0.0; hd];
                matmul_a_bt_acc(&d_out, ids.img_w2.of(&self.values), 1, fd, hd, &mut dh);
                for (g, &hv) in dh.iter_mut().zip(h) {
                    if hv <= 0.0 {
                        *g = 0.0;
                    }
                }
                axpy(1.0, &dh, ids.img_b1.of_mut(grads));
                matmul_at_b_acc(img, &dh, 1, cfg.channel_dim, hd, ids.img_w1.of_mut(grads));
            }
        }
    }
}

/// In-batch-negative loss over `B` post pairs: row `i` scores anchor `i`
/// against every positive, with positive `i` as the true class. Positives
/// sharing an id with the true positive or the anchor are masked out of the
/// denominator. Returns the mean loss; gradients are accumulated when
/// `grads` is given.
pub fn pair_batch_loss(
    tower: &PostTower,
    anchors: &[(u64, &PostFeatures)],
    positives: &[(u64, &PostFeatures)],
    scale: f64,
    grads: Option<&mut [f64]>,
) -> Result<f64> {
    check_dim(anchors.len(), positives.len())?;
    let b = anchors.len();
    if b == 0 {
        return Err(crate::error::Error::Empty("pair batch"));
    }
    let de = tower.config.out_dim;
    let fa: Vec<PostForward> = anchors.iter().map(|(_, p)| tower.forward(p)).collect::<Result<_>>()?;
    let fp: Vec<PostForward> = positives.iter().map(|(_, p)| tower.forward(p)).collect::<Result<_>>()?;
    let mut da = vec![vec![0.0; de]; b];
    let mut dp = vec![vec![0.0; de]; b];
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let a = &fa[i].embedding;
        let cols: Vec<usize> = (0..b)
            .filter(|&j| j == i || (positives[j].0 != positives[i].0 && positives[j].0 != anchors[i].0))
            .collect();
        let logits: Vec<f64> = cols.iter().map(|&j| scale * dot(a, &fp[j].embedding)).collect();
        let pos_at = cols.iter().position(|&j| j == i).expect("diagonal kept");
        let mut probs = logits.clone();
        linalg::softmax(&mut probs);
        total -= libm::log(probs[pos_at].max(f64::MIN_POSITIVE));
        for (c, &j) in cols.iter().enumerate() {
            let g = (probs[c] - f64::from(u8::from(c == pos_at))) * scale * inv_b;
            axpy(g, &fp[j].embedding, &mut da[i]);
            axpy(g, a, &mut dp[j]);
        }
    }
    if let Some(grads) = grads {
        for i in 0..b {
            tower.backward(anchors[i].1, &fa[i], &da[i], grads);
            tower.backward(positives[i].1, &fp[i], &dp[i], grads);
        }
    }
    Ok(total * inv_b)
}
