//! User-tower models behind one interface, and the per-sample objective
//! combining short-term and long-term contrastive terms.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::baseline::AvgBaseline;
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::loss::contrast_with_grad;
use crate::params::Layout;
use crate::sequence::{EmbeddingLookup, SequenceSample};

#[derive(Debug, Clone, PartialEq)]
pub enum UserModel {
    Transformer(ModelParams),
    Average(AvgBaseline),
}

/// Contrastive terms for one sample. `negatives` are row-major unit vectors
/// already filtered for ownership; `weight` multiplies each term's gradient.
#[derive(Debug, Clone, Copy)]
pub struct TermSpec<'a> {
    pub weight: f64,
    pub negatives: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct SampleObjective<'a> {
    pub scale: f64,
    pub horizon: usize,
    pub short: Option<TermSpec<'a>>,
    pub long: Option<TermSpec<'a>>,
}

/// Unweighted loss sums and term counts for one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleLoss {
    pub short_sum: f64,
    pub short_terms: usize,
    pub long_sum: f64,
    pub long_terms: usize,
}

impl SampleLoss {
    pub fn add(&mut self, o: &SampleLoss) {
        self.short_sum += o.short_sum;
        self.short_terms += o.short_terms;
        self.long_sum += o.long_sum;
        self.long_terms += o.long_terms;
    }
}

impl UserModel {
    pub fn values(&self) -> &[f64] {
        match self {
            UserModel::Transformer(p) => &p.values,
            UserModel::Average(p) => &p.values,
        }
    }

    pub fn values_mut(&mut self) -> &mut Vec<f64> {
        match self {
            UserModel::Transformer(p) => &mut p.values,
            UserModel::Average(p) => &mut p.values,
        }
    }

    pub fn layout(&self) -> &Layout {
        match self {
            UserModel::Transformer(p) => p.layout(),
            UserModel::Average(p) => p.layout(),
        }
    }

    pub fn l_max(&self) -> usize {
        match self {
            UserModel::Transformer(p) => p.config.l_max,
            UserModel::Average(p) => p.l_max,
        }
    }

    /// Number of short-term prediction terms `sample` contributes.
    pub fn short_term_count(&self, sample: &SequenceSample) -> usize {
        match self {
            UserModel::Transformer(p) => sample.history.len().min(p.config.l_max).saturating_sub(1),
            UserModel::Average(_) => 0,
        }
    }

    /// Unit-norm user representation in eval mode.
    pub fn user_vector(&self, sample: &SequenceSample, embeddings: &dyn EmbeddingLookup) -> Result<Vec<f64>> {
        match self {
            UserModel::Transformer(p) => p.encode_sequence(sample, embeddings).map(|(_, u)| u),
            UserModel::Average(p) => p.forward(sample, embeddings).map(|f| f.user_vec),
        }
    }

    /// Evaluates the objective for one sample and, when `grads` is given,
    /// accumulates weighted parameter gradients into it. Dropout is active
    /// when `rng` is given.
    pub fn loss_and_grad(
        &self,
        sample: &SequenceSample,
        embeddings: &dyn EmbeddingLookup,
        objective: &SampleObjective<'_>,
        grads: Option<&mut [f64]>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<SampleLoss> {
        let lookup = |id: u64| embeddings.get(id).ok_or(Error::MissingEmbedding(id));
        let mut out = SampleLoss::default();
        let s = objective.scale;

        let de = match self {
            UserModel::Transformer(p) => p.config.d_emb,
            UserModel::Average(p) => p.d_emb,
        };

        let long_terms = |u: &[f64], d_user: &mut [f64], out: &mut SampleLoss| -> Result<()> {
            if let Some(spec) = objective.long {
                for t in sample.long_targets.iter().take(objective.horizon) {
                    let pos = lookup(t.post_id)?;
                    out.long_sum += contrast_with_grad(u, pos, spec.negatives, s, spec.weight, d_user);
                    out.long_terms += 1;
                }
            }
            Ok(())
        };

        match self {
            UserModel::Transformer(p) => {
                let input = p.assemble_input(sample, embeddings)?;
                let fwd = p.forward(&input, rng);
                let mut d_user = vec![0.0; de];
                long_terms(&fwd.user_vec, &mut d_user, &mut out)?;
                let mut d_pos = None;
                if let Some(spec) = objective.short {
                    let start = sample.history.len().saturating_sub(p.config.l_max);
                    let history = &sample.history[start..];
                    let off = usize::from(p.config.use_cls);
                    let mut dp = vec![0.0; fwd.len * de];
                    for i in 0..history.len().saturating_sub(1) {
                        let t = i + off;
                        let anchor = &fwd.position_vecs[t * de..(t + 1) * de];
                        let pos = lookup(history[i + 1].post_id)?;
                        out.short_sum += contrast_with_grad(anchor, pos, spec.negatives, s, spec.weight, &mut dp[t * de..(t + 1) * de]);
                        out.short_terms += 1;
                    }
                    d_pos = Some(dp);
                }
                if let Some(g) = grads {
                    p.backward(&input, &fwd, &d_user, d_pos.as_deref(), g);
                }
            }
            UserModel::Average(p) => {
                let fwd = p.forward(sample, embeddings)?;
                let mut d_user = vec![0.0; de];
                long_terms(&fwd.user_vec, &mut d_user, &mut out)?;
                if let Some(g) = grads {
                    p.backward(&fwd, &d_user, g);
                }
            }
        }
        Ok(out)
    }
}
