//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nxtpost::coldstart::BackfillMode;
use nxtpost::config::{RunConfig, Variant};
use nxtpost::experiments::{self, LadderRow, Prepared};
use nxtpost::serving::{refresh_users, retrieve, serving_sample, EmbeddingStore, RefreshState};
use nxtpost::synth::{measure_survival, DAY};
use nxtpost::{cli, io};
use nxtpost_core::encoder::{EncoderConfig, ModelParams, Pooling};
use nxtpost_core::linalg::normalize;
use nxtpost_core::loss::scaled_cross_entropy;
use nxtpost_core::metrics::{batch_hits_at_k, knn_hits_at_k, Corpus};
use nxtpost_core::model::{SampleObjective, TermSpec, UserModel};
use nxtpost_core::{ActionType, HistoryEvent, SequenceSample, Surface, TargetEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

const CAUSALITY_TRIALS: usize = 100;
const CAUSALITY_BUDGET: Duration = Duration::from_secs(10);
const FD_STEP: f64 = 1e-5;
const FD_MAX_REL_ERROR: f64 = 1e-4;
const FD_BUDGET: Duration = Duration::from_secs(60);
const UNIFORM_LOGIT_TOL: f64 = 1e-9;
const WORKED_EXAMPLE_TOL: f64 = 1e-12;
const ORACLE_TRIALS: usize = 100;
const RANDOM_B: usize = 128;
const RANDOM_HITS_TOL: f64 = 0.01;
const LADDER_BUDGET: Duration = Duration::from_secs(30 * 60);
const MIN_USERS: usize = 500;
const MIN_POSTS: usize = 5_000;
const MIN_EVENTS: usize = 50_000;
const DECAY_K: usize = 20;
const STALE_K: usize = 20;
const STALE_INVERSION: f64 = 0.01;
const CONTROL_DROP: f64 = 0.02;
const SURVIVAL_TOL: f64 = 0.03;
const COLD_K: usize = 10;
const SERVING_QUERIES: usize = 100;
const SERVING_K: usize = 20;
const STRESS_OPS: usize = 10_000;
const REPLAY_TOL: f64 = 1e-7;

const DESK: &str = include_str!("../../../configs/desk.json");
const DECAY: &str = include_str!("../../../configs/decay.json");

/// Small world and model for CLI replay runs.
const TINY: &str = r#"{
  "dataset": { "users": 80, "posts_per_day": 40, "days": 16 },
  "encoder": { "d_model": 16, "heads": 2, "layers": 1, "l_max": 8, "d_ff": 32 },
  "loss": { "scale": 8.0 },
  "train": { "batch_size": 16, "epochs": 1 },
  "eval": { "batch_size": 16, "stale_eval_days": 2, "max_stale_days": 2 }
}"#;

type Outcome = Result<(bool, String), String>;

struct Line {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn run(id: usize, title: &'static str, f: impl FnOnce() -> Outcome) -> Line {
    let t = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => (false, format!("panic: {}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())),
    };
    let line = Line { id, title, pass, detail, secs: t.elapsed().as_secs_f64() };
    println!("criterion {:>2}  {}  {:<26} {} ({:.1} s)", line.id, if line.pass { "PASS" } else { "FAIL" }, line.title, line.detail, line.secs);
    line
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn desk() -> RunConfig {
    RunConfig::from_json(DESK).expect("desk config parses")
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        if normalize(&mut v) > 1e-6 {
            return v;
        }
    }
}

fn random_sample(rng: &mut ChaCha8Rng, len: usize, d_emb: usize, targets: usize) -> (SequenceSample, BTreeMap<u64, Vec<f64>>) {
    let mut emb = BTreeMap::new();
    for id in 0..(len + targets) as u64 {
        emb.insert(id, unit(rng, d_emb));
    }
    let mut ts = 1_000;
    let history = (0..len)
        .map(|i| {
            ts += rng.random_range(1..50_000);
            HistoryEvent {
                post_id: i as u64,
                action: ActionType::OBSERVED[rng.random_range(0..ActionType::OBSERVED.len())],
                surface: Surface::ALL[rng.random_range(0..4)],
                timestamp: ts,
            }
        })
        .collect();
    let cutoff = ts + 10_000;
    let long_targets = (len..len + targets).map(|i| TargetEvent { post_id: i as u64, timestamp: cutoff + i as i64 }).collect();
    (SequenceSample { user_id: 1, history, long_targets, cutoff_time: cutoff }, emb)
}

fn causality() -> Outcome {
    let cfg = EncoderConfig::default();
    assert_eq!((cfg.d_model, cfg.heads, cfg.layers, cfg.l_max), (64, 4, 2, 32));
    let d = cfg.d_model;
    let t = Instant::now();
    let mut violations = 0;
    let mut unchanged_later = 0;
    for trial in 0..CAUSALITY_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + trial as u64);
        let params = ModelParams::new(cfg.clone(), &mut rng).map_err(err)?;
        let (sample, emb) = random_sample(&mut rng, cfg.l_max, cfg.d_emb, 0);
        let base = params.forward(&params.assemble_input(&sample, &emb).map_err(err)?, None);
        let j = rng.random_range(0..sample.history.len());
        let mut perturbed = emb.clone();
        perturbed.insert(sample.history[j].post_id, unit(&mut rng, cfg.d_emb));
        let f = params.forward(&params.assemble_input(&sample, &perturbed).map_err(err)?, None);
        // Token of history event j sits after the CLS token.
        let pos = j + 1;
        if f.hidden[..pos * d] != base.hidden[..pos * d] {
            violations += 1;
        }
        if f.hidden[pos * d..] == base.hidden[pos * d..] {
            unchanged_later += 1;
        }
    }
    let el = t.elapsed();
    Ok((
        violations == 0 && unchanged_later == 0 && el < CAUSALITY_BUDGET,
        format!("{violations} earlier-state changes, {unchanged_later} inert perturbations in {CAUSALITY_TRIALS} trials, {:.2} s", el.as_secs_f64()),
    ))
}

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let cfg = EncoderConfig { d_model: 8, heads: 2, layers: 2, l_max: 5, d_ff: 16, d_emb: 4, dropout: 0.0, pooling: Pooling::Last, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let model = UserModel::Transformer(ModelParams::new(cfg.clone(), &mut rng).map_err(err)?);
    // Nonzero time row so its gradient is exercised away from the initial zeros.
    let mut model = model;
    for v in model.values_mut().iter_mut() {
        *v += 0.05 * (rng.random::<f64>() - 0.5);
    }
    let (sample, emb) = random_sample(&mut rng, 5, cfg.d_emb, 3);
    let negatives: Vec<f64> = (0..6).flat_map(|_| unit(&mut rng, cfg.d_emb)).collect();
    let obj = SampleObjective {
        scale: 5.0,
        horizon: 3,
        short: Some(TermSpec { weight: 0.4, negatives: &negatives }),
        long: Some(TermSpec { weight: 0.6, negatives: &negatives[..16] }),
    };
    let loss = |m: &UserModel| {
        let l = m.loss_and_grad(&sample, &emb, &obj, None, None).expect("loss");
        0.4 * l.short_sum + 0.6 * l.long_sum
    };
    let mut grads = vec![0.0; model.values().len()];
    model.loss_and_grad(&sample, &emb, &obj, Some(&mut grads), None).map_err(err)?;
    let mut worst = 0.0f64;
    for i in 0..grads.len() {
        let mut plus = model.clone();
        plus.values_mut()[i] += FD_STEP;
        let mut minus = model.clone();
        minus.values_mut()[i] -= FD_STEP;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        worst = worst.max((fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6));
    }
    let el = t.elapsed();
    Ok((
        worst < FD_MAX_REL_ERROR && el < FD_BUDGET,
        format!("max relative error {worst:.2e} over {} parameters, {:.2} s", grads.len(), el.as_secs_f64()),
    ))
}

fn loss_exactness() -> Outcome {
    let a = [1.0, 0.0, 0.0];
    let b = [0.0, 1.0, 0.0];
    let none = scaled_cross_entropy(&a, &a, &[], 16.0);
    let mut worst_uniform = 0.0f64;
    for n in [2usize, 17, 1024] {
        let negs: Vec<&[f64]> = vec![&b[..]; n - 1];
        let l = scaled_cross_entropy(&a, &b, &negs, 16.0);
        worst_uniform = worst_uniform.max((l - (n as f64).ln()).abs());
    }
    let worked = scaled_cross_entropy(&a, &a, &[&b[..]], 15.0);
    let expected = (-15.0f64).exp().ln_1p();
    let worked_err = (worked - expected).abs();
    Ok((
        none == 0.0 && worst_uniform <= UNIFORM_LOGIT_TOL && worked_err <= WORKED_EXAMPLE_TOL,
        format!("no-negatives {none}, uniform max error {worst_uniform:.1e}, s=15 error {worked_err:.1e}"),
    ))
}

fn dot_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Rank of `target` after a full descending sort in which the target
/// precedes every equal score.
fn full_sort_rank(scores: &[(u64, f64)], target: u64) -> usize {
    let mut v = scores.to_vec();
    v.sort_by(|x, y| y.1.total_cmp(&x.1).then((x.0 != target).cmp(&(y.0 != target))));
    v.iter().position(|x| x.0 == target).expect("target present")
}

fn metric_oracles() -> Outcome {
    let dim = 6;
    let mut mismatches = 0;
    for trial in 0..ORACLE_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(5_000 + trial as u64);
        let b = rng.random_range(2..48);
        let users: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, dim)).collect();
        let mut posts: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, dim)).collect();
        // Duplicated rows create exact ties.
        for _ in 0..b / 4 {
            let (i, j) = (rng.random_range(0..b), rng.random_range(0..b));
            posts[j] = posts[i].clone();
        }
        let k = rng.random_range(1..=b);
        let flat_u: Vec<f64> = users.concat();
        let flat_p: Vec<f64> = posts.concat();
        let got = batch_hits_at_k(&flat_u, &flat_p, dim, k).map_err(err)?;
        let want = (0..b)
            .filter(|&i| {
                let scores: Vec<(u64, f64)> = posts.iter().enumerate().map(|(j, p)| (j as u64, dot_oracle(&users[i], p))).collect();
                full_sort_rank(&scores, i as u64) < k
            })
            .count();
        mismatches += usize::from(got.hits != want || got.n != b);

        let mut corpus = Corpus::new(dim);
        let ids: Vec<u64> = (0..b as u64).map(|i| 100 + 7 * i).collect();
        for (id, p) in ids.iter().zip(&posts) {
            corpus.insert(*id, p).map_err(err)?;
        }
        let targets: Vec<Vec<u64>> = (0..b).map(|_| (0..rng.random_range(1..4)).map(|_| ids[rng.random_range(0..b)]).collect()).collect();
        let got = knn_hits_at_k(users.iter().map(Vec::as_slice).zip(targets.iter().map(Vec::as_slice)), &corpus, k).map_err(err)?;
        let want = users
            .iter()
            .zip(&targets)
            .filter(|(u, ts)| {
                let scores: Vec<(u64, f64)> = ids.iter().zip(&posts).map(|(id, p)| (*id, dot_oracle(u, p))).collect();
                ts.iter().any(|t| full_sort_rank(&scores, *t) < k)
            })
            .count();
        mismatches += usize::from(got.hits != want);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9_000);
    let mut total = 0.0;
    for _ in 0..ORACLE_TRIALS {
        let u: Vec<f64> = (0..RANDOM_B).flat_map(|_| unit(&mut rng, 16)).collect();
        let p: Vec<f64> = (0..RANDOM_B).flat_map(|_| unit(&mut rng, 16)).collect();
        total += batch_hits_at_k(&u, &p, 16, 1).map_err(err)?.value();
    }
    let mean = total / ORACLE_TRIALS as f64;
    let expected = 1.0 / RANDOM_B as f64;
    Ok((
        mismatches == 0 && (mean - expected).abs() <= RANDOM_HITS_TOL,
        format!("{mismatches} oracle mismatches in {} comparisons, random Hits@1 {mean:.4} vs {expected:.4}", 2 * ORACLE_TRIALS),
    ))
}

struct DeskRun {
    p: Prepared,
    rows: Vec<(LadderRow, UserModel)>,
}

impl DeskRun {
    fn model(&self, v: Variant) -> &UserModel {
        &self.rows.iter().find(|(r, _)| r.variant == v).expect("variant trained").1
    }

    fn hits1(&self, v: Variant) -> f64 {
        self.rows.iter().find(|(r, _)| r.variant == v).and_then(|(r, _)| r.metric("batch_hits", 1)).unwrap_or(f64::NAN)
    }
}

fn ladder(runs: &mut Vec<DeskRun>) -> Outcome {
    let t = Instant::now();
    let cfg = desk();
    let variants = [Variant::Ttt, Variant::TttCausalLong, Variant::FullWithTime];
    let mut sizes = Vec::new();
    for seed in SEEDS {
        let p = Prepared::generate(&cfg, seed).map_err(err)?;
        sizes.push((p.world.users.len(), p.world.posts.len(), p.world.events.len()));
        let rows = experiments::ladder_models(&p, &variants).map_err(err)?;
        runs.push(DeskRun { p, rows });
    }
    let el = t.elapsed();
    let big = sizes.iter().all(|&(u, p, e)| u >= MIN_USERS && p >= MIN_POSTS && e >= MIN_EVENTS);
    let upper = runs.iter().filter(|r| r.hits1(Variant::FullWithTime) >= r.hits1(Variant::TttCausalLong)).count();
    let lower = runs.iter().filter(|r| r.hits1(Variant::TttCausalLong) >= r.hits1(Variant::Ttt)).count();
    let table: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.4}/{:.4}/{:.4}", r.hits1(Variant::Ttt), r.hits1(Variant::TttCausalLong), r.hits1(Variant::FullWithTime)))
        .collect();
    let min_events = sizes.iter().map(|s| s.2).min().unwrap_or(0);
    Ok((
        big && upper >= 2 && lower >= 2 && el < LADDER_BUDGET,
        format!(
            "Hits@1 ttt/causal_long/full per seed [{}]; full>=long {upper}/3, long>=ttt {lower}/3; min events {min_events}; {:.0} s",
            table.join(", "),
            el.as_secs_f64()
        ),
    ))
}

fn temporal_decay() -> Outcome {
    let cfg = RunConfig::from_json(DECAY).map_err(err)?;
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let p = Prepared::generate(&cfg, seed).map_err(err)?;
        let r = experiments::temporal_decay(&p, DECAY_K).map_err(err)?;
        let (with_long, without_long) = r.final_drops();
        wins += usize::from(with_long < without_long);
        detail.push(format!("{with_long:.3} vs {without_long:.3}"));
    }
    Ok((wins >= 2, format!("day-7 drop with/without long-term loss [{}]; smaller on {wins}/3", detail.join(", "))))
}

fn drops(series: &[nxtpost::eval::EvalReport]) -> Vec<f64> {
    series.iter().map(|r| r.relative_drop.unwrap_or(f64::NAN)).collect()
}

fn staleness() -> Outcome {
    let cfg = desk();
    let drift = drops(&experiments::staleness(&Prepared::generate(&cfg, SEEDS[0]).map_err(err)?, STALE_K).map_err(err)?);
    let control_cfg = experiments::control_config(&cfg);
    let control = drops(&experiments::staleness(&Prepared::generate(&control_cfg, SEEDS[0]).map_err(err)?, STALE_K).map_err(err)?);
    let inversions: Vec<f64> = drift.windows(2).filter(|w| w[1] < w[0]).map(|w| w[0] - w[1]).collect();
    let monotone = drift.len() == 7 && inversions.len() <= 1 && inversions.iter().all(|&x| x <= STALE_INVERSION);
    let worst_control = control.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let fmt = |v: &[f64]| v.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join(" ");
    Ok((
        monotone && control.len() == 7 && worst_control <= CONTROL_DROP,
        format!("drift drops [{}], control max |drop| {worst_control:.4}", fmt(&drift)),
    ))
}

fn survival(runs: &[DeskRun]) -> Outcome {
    let cfg = desk();
    let mut ok = !runs.is_empty();
    let mut detail = Vec::new();
    for r in runs {
        let (w1, w2) = measure_survival(&r.p.world.events, cfg.dataset.days);
        ok &= (w1 - cfg.dataset.week1).abs() <= SURVIVAL_TOL && (w2 - cfg.dataset.week2).abs() <= SURVIVAL_TOL;
        detail.push(format!("{w1:.3}/{w2:.3}"));
    }
    Ok((ok, format!("week1/week2 per seed [{}] vs {:.2}/{:.2}", detail.join(", "), cfg.dataset.week1, cfg.dataset.week2)))
}

fn cold_start(runs: &[DeskRun]) -> Outcome {
    let modes = [BackfillMode::None, BackfillMode::Popular, BackfillMode::SimilarUser];
    let (mut pop, mut sim, mut sim_pop) = (0, 0, 0);
    let mut detail = Vec::new();
    for r in runs {
        let (_, eval) = r.p.samples();
        let rows = experiments::cold_start_with(&r.p, r.model(Variant::TttCausalLong), &eval, &modes, COLD_K).map_err(err)?;
        let v: Vec<f64> = rows.iter().map(|row| row.report.value).collect();
        pop += usize::from(v[1] >= v[0]);
        sim += usize::from(v[2] >= v[0]);
        sim_pop += usize::from(v[2] >= v[1]);
        detail.push(format!("{:.4}/{:.4}/{:.4}", v[0], v[1], v[2]));
    }
    Ok((
        !runs.is_empty() && pop >= 2 && sim >= 2 && sim_pop >= 2,
        format!("Hits@10 none/popular/similar [{}]; popular>=none {pop}/3, similar>=none {sim}/3, similar>=popular {sim_pop}/3", detail.join(", ")),
    ))
}

fn serving(runs: &[DeskRun]) -> Outcome {
    let r = runs.first().ok_or("no trained desk world")?;
    let p = &r.p;
    let model = r.model(Variant::FullWithTime);
    let day = p.holdout().start;
    let now = day * DAY;
    let store = EmbeddingStore::new(p.d_emb());
    for post in p.world.posts.iter().filter(|x| !x.integrity && x.created_at <= day) {
        store.upsert_post(post, &p.encoder, now).map_err(err)?;
    }
    store.stage_day(day);
    store.publish();
    let integrity: BTreeSet<u64> = p.world.posts.iter().filter(|x| x.integrity).map(|x| x.post_id).collect();
    let flagged = |id: u64| integrity.contains(&id);
    let mut state = RefreshState::default();
    refresh_users(&store, model, &p.events, &flagged, &mut state, now).map_err(err)?;
    let snap = store.snapshot();

    let alive: Vec<(u64, &Vec<f64>)> = p
        .world
        .posts
        .iter()
        .filter(|x| !x.integrity && x.alive_on(day))
        .map(|x| (x.post_id, &p.embeddings.vectors[&x.post_id]))
        .collect();
    let by_user = nxtpost::synth::by_user(&p.events);
    let users: Vec<u64> = by_user.keys().copied().filter(|u| snap.users.contains_key(u)).take(SERVING_QUERIES).collect();
    let mut mismatches = 0;
    for &u in &users {
        let got = retrieve(&snap, u, SERVING_K, -1.0).map_err(err)?;
        let sample = serving_sample(u, &by_user[&u], &flagged, model.l_max(), now);
        let q = model.user_vector(&sample, &p.embeddings).map_err(err)?;
        let mut scored: Vec<(u64, f64)> = alive.iter().map(|(id, v)| (*id, dot_oracle(&q, v))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(SERVING_K);
        if got.items != scored {
            mismatches += 1;
        }
    }
    let parity = users.len() == SERVING_QUERIES && mismatches == 0;
    let (torn, ops) = stress_snapshots();
    Ok((
        parity && torn == 0 && ops >= STRESS_OPS,
        format!("{mismatches} ranking mismatches over {} queries; {torn} torn reads in {ops} operations", users.len()),
    ))
}

/// Concurrent readers check that every snapshot holds one write batch in
/// full: all users carry the batch number as version and vector value.
fn stress_snapshots() -> (usize, usize) {
    const USERS: u64 = 16;
    const WRITES: usize = 500;
    let store = Arc::new(EmbeddingStore::new(2));
    let torn = Arc::new(AtomicUsize::new(0));
    let reads = Arc::new(AtomicUsize::new(0));
    let done = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..3)
        .map(|_| {
            let (store, torn, reads, done) = (store.clone(), torn.clone(), reads.clone(), done.clone());
            std::thread::spawn(move || {
                while !done.load(Ordering::Acquire) || reads.load(Ordering::Relaxed) < STRESS_OPS {
                    let snap = store.snapshot();
                    let versions: BTreeSet<u64> = snap.users.values().map(|e| e.version).collect();
                    let consistent = versions.len() <= 1
                        && snap.users.values().all(|e| e.vector[0] == e.version as f64)
                        && (snap.users.is_empty() || snap.users.len() == USERS as usize);
                    if !consistent {
                        torn.fetch_add(1, Ordering::Relaxed);
                    }
                    reads.fetch_add(1, Ordering::Relaxed);
                }
            })
        })
        .collect();
    let mut writes = 0;
    for batch in 1..=WRITES {
        for u in 0..USERS {
            store.stage_user(u, vec![batch as f64, 0.0], batch as i64).expect("dimension");
            writes += 1;
        }
        store.publish();
        writes += 1;
    }
    done.store(true, Ordering::Release);
    for r in readers {
        r.join().expect("reader thread");
    }
    (torn.load(Ordering::Relaxed), writes + reads.load(Ordering::Relaxed))
}

fn argv(args: &[&str]) -> Vec<String> {
    args.iter().map(|s| s.to_string()).collect()
}

fn replay_and_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = |name: &str| dir.path().join(name).display().to_string();
    std::fs::write(d("tiny.json"), TINY).map_err(err)?;
    let runs = [
        argv(&["gen-data", "--config", &d("tiny.json"), "--seed", "5", "--out", &d("world")]),
        argv(&["train", "--config", &d("tiny.json"), "--seed", "5", "--world", &d("world"), "--out", &d("train")]),
        argv(&["eval", "--config", &d("tiny.json"), "--seed", "5", "--world", &d("world"), "--checkpoint", &d("train/checkpoint"), "--out", &d("eval")]),
        argv(&["experiment", "staleness", "--config", &d("tiny.json"), "--seed", "5", "--max-days", "2", "--out", &d("stale")]),
    ];
    let mut metrics = 0;
    for a in &runs {
        cli::run(a).map_err(err)?;
    }
    for (i, out) in ["world", "train", "eval", "stale"].iter().enumerate() {
        let replayed = cli::replay(&Path::new(&d(out)).join("run_manifest.json"), &dir.path().join(format!("replay{i}"))).map_err(err)?;
        let original = nxtpost::manifest::RunManifest::read(&Path::new(&d(out)).join("run_manifest.json")).map_err(err)?;
        if !nxtpost::manifest::metric_mismatches(&original.metrics, &replayed.metrics, REPLAY_TOL).is_empty() {
            return Ok((false, format!("{out} replay diverged")));
        }
        metrics += replayed.metrics.len();
    }

    let emb_path = Path::new(&d("world")).join(cli::EMBEDDINGS_FILE);
    let bytes = std::fs::read(&emb_path).map_err(err)?;
    let emb = io::read_embeddings(&emb_path).map_err(err)?;
    let emb_exact = io::encode_embeddings(&emb) == bytes;

    let ckpt = Path::new(&d("train")).join("checkpoint");
    let model = io::load_user_model(&ckpt).map_err(err)?;
    let again = dir.path().join("ckpt2");
    io::save_user_model(&again, &model, None).map_err(err)?;
    let reloaded = io::load_user_model(&again).map_err(err)?;
    let values_exact = model.values().iter().zip(reloaded.values()).all(|(a, b)| a.to_bits() == b.to_bits());
    let payload_exact = std::fs::read(ckpt.join(io::CHECKPOINT_PAYLOAD)).map_err(err)? == std::fs::read(again.join(io::CHECKPOINT_PAYLOAD)).map_err(err)?;
    Ok((
        emb_exact && values_exact && payload_exact,
        format!("{} runs replayed, {metrics} metrics within {REPLAY_TOL:e}; embeddings {emb_exact}, checkpoint values {values_exact}, payload {payload_exact}", runs.len()),
    ))
}

fn main() {
    println!("acceptance suite");
    let mut lines = vec![
        run(1, "causality", causality),
        run(2, "gradient oracle", gradient_oracle),
        run(3, "loss exactness", loss_exactness),
        run(4, "metric oracles", metric_oracles),
    ];
    let mut desk_runs = Vec::new();
    lines.push(run(5, "ablation ladder", || ladder(&mut desk_runs)));
    lines.push(run(6, "temporal decay", temporal_decay));
    lines.push(run(7, "staleness", staleness));
    lines.push(run(8, "volatility calibration", || survival(&desk_runs)));
    lines.push(run(9, "cold start", || cold_start(&desk_runs)));
    lines.push(run(10, "serving parity", || serving(&desk_runs)));
    lines.push(run(11, "reproducibility", replay_and_round_trip));
    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
