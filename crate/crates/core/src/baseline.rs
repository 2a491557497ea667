//! Averaged-embedding user tower used as the non-sequential baseline.
//!
//! The user vector is `normalize(relu(mean · W1 + b1) · W2 + b2)` where
//! `mean` is the average embedding of the history posts. Order, actions and
//! timing are ignored.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, axpy, matmul, matmul_a_bt_acc, matmul_at_b_acc};
use crate::params::{Init, Layout, TensorId};
use crate::sequence::{EmbeddingLookup, SequenceSample};

#[derive(Debug, Clone, PartialEq)]
pub struct AvgBaseline {
    pub d_emb: usize,
    pub hidden: usize,
    pub l_max: usize,
    layout: Layout,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
    pub values: Vec<f64>,
}

/// Intermediates of one baseline forward pass.
#[derive(Debug, Clone)]
pub struct AvgForward {
    mean: Vec<f64>,
    h: Vec<f64>,
    norm: f64,
    pub user_vec: Vec<f64>,
}

impl AvgBaseline {
    fn build_layout(d_emb: usize, hidden: usize) -> (Layout, [TensorId; 4]) {
        let mut l = Layout::new();
        let w1 = l.push("avg.w1", d_emb, hidden, Init::Xavier);
        let b1 = l.push("avg.b1", 1, hidden, Init::Constant(0.0));
        let w2 = l.push("avg.w2", hidden, d_emb, Init::Xavier);
        let b2 = l.push("avg.b2", 1, d_emb, Init::Constant(0.0));
        (l, [w1, b1, w2, b2])
    }

    pub fn new<R: Rng + ?Sized>(d_emb: usize, hidden: usize, l_max: usize, rng: &mut R) -> Self {
        let (layout, [w1, b1, w2, b2]) = Self::build_layout(d_emb, hidden);
        let values = layout.initialize(rng);
        Self { d_emb, hidden, l_max, layout, w1, b1, w2, b2, values }
    }

    pub fn from_values(d_emb: usize, hidden: usize, l_max: usize, values: Vec<f64>) -> Result<Self> {
        let (layout, [w1, b1, w2, b2]) = Self::build_layout(d_emb, hidden);
        check_dim(layout.total(), values.len())?;
        Ok(Self { d_emb, hidden, l_max, layout, w1, b1, w2, b2, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn forward(&self, sample: &SequenceSample, embeddings: &dyn EmbeddingLookup) -> Result<AvgForward> {
        let de = self.d_emb;
        let start = sample.history.len().saturating_sub(self.l_max);
        let history = &sample.history[start..];
        let mut mean = vec![0.0; de];
        for ev in history {
            let e = embeddings.get(ev.post_id).ok_or(Error::MissingEmbedding(ev.post_id))?;
            check_dim(de, e.len())?;
            axpy(1.0, e, &mut mean);
        }
        if !history.is_empty() {
            mean.iter_mut().for_each(|v| *v /= history.len() as f64);
        }
        let mut h = vec![0.0; self.hidden];
        matmul(&mean, self.w1.of(&self.values), 1, de, self.hidden, &mut h);
        for (v, &b) in h.iter_mut().zip(self.b1.of(&self.values)) {
            *v = (*v + b).max(0.0);
        }
        let mut out = vec![0.0; de];
        matmul(&h, self.w2.of(&self.values), 1, self.hidden, de, &mut out);
        axpy(1.0, self.b2.of(&self.values), &mut out);
        let norm = linalg::normalize(&mut out);
        Ok(AvgForward { mean, h, norm, user_vec: out })
    }

    pub fn backward(&self, fwd: &AvgForward, d_user_vec: &[f64], grads: &mut [f64]) {
        let de = self.d_emb;
        let hd = self.hidden;
        let mut d_out = vec![0.0; de];
        linalg::normalize_backward(&fwd.user_vec, fwd.norm, d_user_vec, &mut d_out);
        axpy(1.0, &d_out, self.b2.of_mut(grads));
        matmul_at_b_acc(&fwd.h, &d_out, 1, hd, de, self.w2.of_mut(grads));
        let mut dh = vec![0.0; hd];
        matmul_a_bt_acc(&d_out, self.w2.of(&self.values), 1, de, hd, &mut dh);
        for (g, &h) in dh.iter_mut().zip(&fwd.h) {
            if h <= 0.0 {
                *g = 0.0;
            }
        }
        axpy(1.0, &dh, self.b1.of_mut(grads));
        matmul_at_b_acc(&fwd.mean, &dh, 1, de, hd, self.w1.of_mut(grads));
    }
}
