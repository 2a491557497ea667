//! Data generation, sample construction, persistence and training on a
//! small world.

use std::collections::{BTreeMap, BTreeSet};

use nxtpost::config::{RunConfig, Variant};
use nxtpost::experiments::Prepared;
use nxtpost::io;
use nxtpost::synth::{by_user, day_of, filter_events, generate_world, split_samples, World, DAY};
use nxtpost::trainer::{assemble_batches, build_model, train};

const SMALL: &str = r#"{
  "dataset": { "users": 60, "posts_per_day": 30, "days": 12 },
  "encoder": { "d_model": 16, "heads": 2, "layers": 1, "l_max": 8, "d_ff": 32 },
  "loss": { "scale": 8.0 },
  "train": { "batch_size": 8, "epochs": 2, "eval_each_epoch": false, "dropout": 0.0 },
  "eval": { "batch_size": 8 }
}"#;

fn small() -> RunConfig {
    RunConfig::from_json(SMALL).unwrap()
}

fn world(seed: u64) -> World {
    generate_world(&small().dataset, seed).unwrap()
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = world(4);
    assert_eq!(a, world(4));
    assert_ne!(a.events, world(5).events);
}

#[test]
fn events_respect_world_invariants() {
    let cfg = small();
    let w = world(1);
    let posts = w.post_index();
    let users: BTreeSet<u64> = w.users.iter().map(|u| u.user_id).collect();
    assert!(w.events.windows(2).all(|p| (p[0].user_id, p[0].timestamp) <= (p[1].user_id, p[1].timestamp)));
    let mut pairs = BTreeSet::new();
    for e in &w.events {
        let post = posts[&e.post_id];
        assert!(users.contains(&e.user_id));
        assert!(post.alive_on(day_of(e.timestamp)), "event on dead post {}", e.post_id);
        assert!(e.timestamp >= 0 && e.timestamp < cfg.dataset.days as i64 * DAY);
        assert!(pairs.insert((e.user_id, e.post_id)), "user {} engaged post {} twice", e.user_id, e.post_id);
    }
    for p in &w.posts {
        let n: f64 = p.topic.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn filtering_is_idempotent() {
    let w = world(2);
    let integrity: BTreeMap<u64, bool> = w.posts.iter().map(|p| (p.post_id, p.integrity)).collect();
    let flagged = |id: u64| integrity[&id];
    let once = filter_events(&w.events, &flagged, 2, true);
    assert!(once.iter().all(|e| !integrity[&e.post_id]));
    let twice = filter_events(&once, &flagged, 2, true);
    assert_eq!(once, twice);
}

#[test]
fn splits_do_not_leak_across_the_cutoff() {
    let w = world(3);
    let split = 10 * DAY;
    let (train, eval) = split_samples(&w.events, 8, 5, split, 2, 10);
    assert!(!train.is_empty() && !eval.is_empty());
    for s in &train {
        assert!(s.history.iter().all(|h| h.timestamp < split));
        assert!(s.long_targets.iter().all(|t| t.timestamp < split));
        assert!(s.is_well_formed());
    }
    for s in &eval {
        assert!(s.history.iter().all(|h| h.timestamp < split));
        assert!(s.long_targets.iter().all(|t| t.timestamp >= split));
        let seen: BTreeSet<u64> = s.history.iter().map(|h| h.post_id).collect();
        assert!(s.long_targets.iter().all(|t| !seen.contains(&t.post_id)));
        assert!(s.history.len() <= 8 && s.long_targets.len() <= 5);
    }
    let per_user = by_user(&w.events);
    for s in &eval {
        let last_pre = per_user[&s.user_id].iter().filter(|e| e.timestamp < split).map(|e| e.timestamp).max();
        assert_eq!(s.history.last().map(|h| h.timestamp), last_pre);
    }
}

#[test]
fn world_and_embeddings_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = Prepared::generate(&small(), 6).unwrap();
    io::save_world(dir.path(), &p.world).unwrap();
    assert_eq!(io::load_world(dir.path()).unwrap(), p.world);

    let path = dir.path().join("emb.nxtp");
    io::write_embeddings(&path, &p.embeddings).unwrap();
    let back = io::read_embeddings(&path).unwrap();
    assert_eq!(back.vectors.len(), p.embeddings.vectors.len());
    for (id, v) in &p.embeddings.vectors {
        assert!(v.iter().zip(&back.vectors[id]).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let bytes = std::fs::read(&path).unwrap();
    assert!(io::decode_embeddings(&bytes[..bytes.len() - 3], &path).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(io::decode_embeddings(&bad, &path).is_err());
}

#[test]
fn batches_partition_samples_with_distinct_users() {
    let p = Prepared::generate(&small(), 7).unwrap();
    let (train_s, _) = p.samples();
    let batches = assemble_batches(&train_s, 8, 11, 0);
    assert!(!batches.is_empty());
    let mut seen = BTreeSet::new();
    for b in &batches {
        assert_eq!(b.len(), 8);
        let users: BTreeSet<u64> = b.iter().map(|&i| train_s[i].user_id).collect();
        assert_eq!(users.len(), 8);
        assert!(b.iter().all(|&i| seen.insert(i)));
    }
    assert_eq!(batches, assemble_batches(&train_s, 8, 11, 0));
    assert_ne!(batches, assemble_batches(&train_s, 8, 11, 1));
}

#[test]
fn training_behaviour() {
    let cfg = small();
    let p = Prepared::generate(&cfg, 8).unwrap();
    let (train_s, eval_s) = p.samples();
    let tc = cfg.train.clone();

    let fit = |lr: f64, epochs: usize| {
        let tc = nxtpost::config::TrainConfig { learning_rate: lr, epochs, variant: Variant::FullWithTime, ..tc.clone() };
        let (mut model, loss) = build_model(Variant::FullWithTime, &cfg.encoder, &cfg.loss, &tc, p.d_emb()).unwrap();
        let init = model.values().to_vec();
        let report = train(&mut model, &loss, &train_s, &eval_s, &p.embeddings, &tc, &cfg.eval).unwrap();
        (init, model, report)
    };

    let (init, frozen, report) = fit(0.0, 1);
    assert!(report.steps > 0);
    assert_eq!(init, frozen.values());

    let (_, untouched, report) = fit(1e-3, 0);
    assert_eq!(report.steps, 0);
    assert_eq!(init, untouched.values());

    let (_, a, ra) = fit(3e-3, 4);
    let (_, b, rb) = fit(3e-3, 4);
    assert_eq!(a.values(), b.values(), "same seed must give identical parameters");
    assert_eq!(ra.losses, rb.losses);
    assert!(ra.epochs.last().unwrap().mean_loss < ra.epochs[0].mean_loss, "{:?}", ra.epochs);
    assert!(a.values().iter().all(|v| *v == (*v as f32) as f64));
}
