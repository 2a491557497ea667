//! Analytic gradients of the full user-tower objective against central
//! finite differences in double precision.

use std::collections::BTreeMap;

use nxtpost_core::encoder::{EncoderConfig, ModelParams, Pooling};
use nxtpost_core::linalg::normalize;
use nxtpost_core::model::{SampleObjective, TermSpec, UserModel};
use nxtpost_core::{ActionType, HistoryEvent, SequenceSample, Surface, TargetEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    normalize(&mut v);
    v
}

struct Fixture {
    sample: SequenceSample,
    emb: BTreeMap<u64, Vec<f64>>,
    negatives: Vec<f64>,
}

fn fixture(seed: u64, len: usize, d_emb: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emb = BTreeMap::new();
    for id in 0..(len as u64 + 3) {
        emb.insert(id, unit(&mut rng, d_emb));
    }
    let history = (0..len)
        .map(|i| HistoryEvent {
            post_id: i as u64,
            action: ActionType::OBSERVED[(i * 2) % 9],
            surface: Surface::ALL[i % 4],
            timestamp: 1_000 + 3_600 * i as i64,
        })
        .collect();
    let long_targets = (len as u64..len as u64 + 3)
        .map(|id| TargetEvent { post_id: id, timestamp: 1_000_000 + id as i64 })
        .collect();
    let negatives = (0..6).flat_map(|_| unit(&mut rng, d_emb)).collect();
    Fixture { sample: SequenceSample { user_id: 7, history, long_targets, cutoff_time: 900_000 }, emb, negatives }
}

fn objective(f: &Fixture) -> SampleObjective<'_> {
    SampleObjective {
        scale: 4.0,
        horizon: 3,
        short: Some(TermSpec { weight: 0.3, negatives: &f.negatives }),
        long: Some(TermSpec { weight: 0.7, negatives: &f.negatives[..12] }),
    }
}

fn weighted_loss(model: &UserModel, f: &Fixture) -> f64 {
    let obj = objective(f);
    let l = model.loss_and_grad(&f.sample, &f.emb, &obj, None, None).unwrap();
    0.3 * l.short_sum + 0.7 * l.long_sum
}

/// Max relative error `|a − n| / max(|a|, |n|, 1e-6)` over all parameters.
fn max_relative_error(model: &UserModel, f: &Fixture) -> (f64, usize) {
    let obj = objective(f);
    let mut grads = vec![0.0; model.values().len()];
    model.loss_and_grad(&f.sample, &f.emb, &obj, Some(&mut grads), None).unwrap();
    let mut worst = (0.0, 0);
    for i in 0..grads.len() {
        let mut plus = model.clone();
        plus.values_mut()[i] += STEP;
        let mut minus = model.clone();
        minus.values_mut()[i] -= STEP;
        let fd = (weighted_loss(&plus, f) - weighted_loss(&minus, f)) / (2.0 * STEP);
        let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

fn micro(pooling: Pooling, causal: bool) -> EncoderConfig {
    EncoderConfig { d_model: 8, heads: 2, layers: 2, l_max: 5, dropout: 0.0, pooling, d_ff: 16, d_emb: 4, causal, ..Default::default() }
}

#[test]
fn transformer_gradients_match_finite_differences() {
    for (seed, pooling, causal) in [
        (1, Pooling::Last, true),
        (2, Pooling::Mean, true),
        (3, Pooling::Sum, false),
        (4, Pooling::Attention, true),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = UserModel::Transformer(ModelParams::new(micro(pooling, causal), &mut rng).unwrap());
        let f = fixture(seed, 5, 4);
        let (err, at) = max_relative_error(&model, &f);
        let name = &model.layout().specs().iter().rfind(|s| s.id.offset <= at).unwrap().name;
        assert!(err < 1e-4, "{pooling:?}: relative error {err:e} at {name}[{at}]");
    }
}

#[test]
fn baseline_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = nxtpost_core::baseline::AvgBaseline::new(4, 6, 5, &mut rng);
    // Nonzero biases keep the pre-normalization output away from the origin.
    let values: Vec<f64> = base.values.iter().map(|v| v + 0.3 * (rng.random::<f64>() - 0.2)).collect();
    let model = UserModel::Average(nxtpost_core::baseline::AvgBaseline::from_values(4, 6, 5, values).unwrap());
    let f = fixture(9, 4, 4);
    let (err, at) = max_relative_error(&model, &f);
    assert!(err < 1e-4, "relative error {err:e} at {at}");
}

#[test]
fn total_gradient_is_weighted_sum_of_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = UserModel::Transformer(ModelParams::new(micro(Pooling::Last, true), &mut rng).unwrap());
    let f = fixture(11, 5, 4);
    let n = model.values().len();
    let grad_of = |short_w: f64, long_w: f64| {
        let obj = SampleObjective {
            scale: 4.0,
            horizon: 3,
            short: Some(TermSpec { weight: short_w, negatives: &f.negatives }),
            long: Some(TermSpec { weight: long_w, negatives: &f.negatives }),
        };
        let mut g = vec![0.0; n];
        model.loss_and_grad(&f.sample, &f.emb, &obj, Some(&mut g), None).unwrap();
        g
    };
    let short = grad_of(1.0, 0.0);
    let long = grad_of(0.0, 1.0);
    let total = grad_of(0.25, 0.75);
    for i in 0..n {
        assert!((total[i] - (0.25 * short[i] + 0.75 * long[i])).abs() < 1e-12);
    }
}
