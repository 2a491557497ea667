//! Embedding store, refresh, retrieval, calibration and backfill.

use std::collections::{BTreeMap, BTreeSet};

use nxtpost::coldstart::{popular_backfill, similar_user_backfill, with_backfill, BackfillPolicy, Popularity, UserSimilarity};
use nxtpost::config::{RunConfig, Variant};
use nxtpost::error::Error;
use nxtpost::experiments::Prepared;
use nxtpost::serving::{calibrate_threshold, refresh_users, retrieve, serving_sample, EmbeddingStore, PostMeta, RefreshState};
use nxtpost::synth::{by_user, InteractionEvent, DAY};
use nxtpost::trainer::build_model;
use nxtpost_core::{ActionType, HistoryEvent, SequenceSample, Surface};

const SMALL: &str = r#"{
  "dataset": { "users": 50, "posts_per_day": 30, "days": 10, "integrity_rate": 0.1 },
  "encoder": { "d_model": 16, "heads": 2, "layers": 1, "l_max": 8, "d_ff": 32 }
}"#;

fn ev(user: u64, post: u64, ts: i64) -> InteractionEvent {
    InteractionEvent { user_id: user, post_id: post, action: ActionType::Like, surface: Surface::Feed, timestamp: ts }
}

fn meta(created_at: i64, lifetime_days: u32) -> PostMeta {
    PostMeta { created_at, lifetime_days }
}

#[test]
fn versions_and_visibility() {
    let store = EmbeddingStore::new(2);
    assert_eq!(store.stage_post(1, vec![1.0, 0.0], meta(0, 2), 0).unwrap(), 1);
    assert_eq!(store.stage_post(1, vec![0.0, 1.0], meta(0, 2), 1).unwrap(), 2);
    assert!(store.snapshot().posts.is_empty());
    store.stage_day(0);
    let id = store.publish();
    let snap = store.snapshot();
    assert_eq!(snap.id, id);
    assert_eq!(snap.posts[&1].0.version, 2);
    assert_eq!(snap.posts[&1].0.vector, vec![0.0, 1.0]);
    assert_eq!(store.stage_post(1, vec![1.0, 0.0], meta(0, 2), 2).unwrap(), 3);
    assert!(store.stage_user(5, vec![1.0], 0).is_err());

    store.stage_day(2);
    store.publish();
    assert!(store.snapshot().alive.is_empty(), "post expired on day 2");
    assert_eq!(snap.alive.len(), 1, "old snapshot is unchanged");
}

#[test]
fn integrity_posts_are_rejected() {
    let p = Prepared::generate(&RunConfig::from_json(SMALL).unwrap(), 2).unwrap();
    let store = EmbeddingStore::new(p.d_emb());
    let bad = p.world.posts.iter().find(|x| x.integrity).expect("an integrity post");
    assert!(matches!(store.upsert_post(bad, &p.encoder, 0), Err(Error::IntegrityRejected(id)) if id == bad.post_id));
    let good = p.world.posts.iter().find(|x| !x.integrity).unwrap();
    store.upsert_post(good, &p.encoder, 0).unwrap();
    store.publish();
    assert_eq!(store.snapshot().posts[&good.post_id].0.vector, p.embeddings.vectors[&good.post_id]);
}

#[test]
fn refresh_only_touches_users_with_new_events() {
    let cfg = RunConfig::from_json(SMALL).unwrap();
    let p = Prepared::generate(&cfg, 3).unwrap();
    let (model, _) = build_model(Variant::FullWithTime, &cfg.encoder, &cfg.loss, &cfg.train, p.d_emb()).unwrap();
    let store = EmbeddingStore::new(p.d_emb());
    for post in p.world.posts.iter().filter(|x| !x.integrity) {
        store.upsert_post(post, &p.encoder, 0).unwrap();
    }
    store.publish();
    let integrity: BTreeSet<u64> = p.world.posts.iter().filter(|x| x.integrity).map(|x| x.post_id).collect();
    let flagged = |id: u64| integrity.contains(&id);
    let mut state = RefreshState::default();

    let now = 6 * DAY;
    let first = refresh_users(&store, &model, &p.world.events, &flagged, &mut state, now).unwrap();
    let active: BTreeSet<u64> = p.world.events.iter().filter(|e| e.timestamp < now).map(|e| e.user_id).collect();
    assert_eq!(first, active.len());
    assert_eq!(refresh_users(&store, &model, &p.world.events, &flagged, &mut state, now).unwrap(), 0);

    let later = 7 * DAY;
    let moved: BTreeSet<u64> = p.world.events.iter().filter(|e| e.timestamp >= now && e.timestamp < later).map(|e| e.user_id).collect();
    let before = store.snapshot();
    assert_eq!(refresh_users(&store, &model, &p.world.events, &flagged, &mut state, later).unwrap(), moved.len());
    let after = store.snapshot();
    let by = by_user(&p.world.events);
    for (u, e) in after.users.iter() {
        if moved.contains(u) {
            assert_eq!(e.version, if active.contains(u) { 2 } else { 1 });
            let sample = serving_sample(*u, &by[u], &flagged, model.l_max(), later);
            assert!(sample.history.iter().all(|h| !integrity.contains(&h.post_id)));
            assert_eq!(e.vector, model.user_vector(&sample, &p.embeddings).unwrap());
        } else {
            assert_eq!(e, &before.users[u]);
        }
    }
}

#[test]
fn retrieval_threshold_and_cold_users() {
    let store = EmbeddingStore::new(2);
    for (id, v) in [(1, [1.0, 0.0]), (2, [0.0, 1.0]), (3, [-1.0, 0.0]), (4, [0.6, 0.8])] {
        store.stage_post(id, v.to_vec(), meta(0, 5), 0).unwrap();
    }
    store.stage_user(9, vec![1.0, 0.0], 0).unwrap();
    store.stage_day(1);
    store.publish();
    let snap = store.snapshot();
    let all = retrieve(&snap, 9, 10, -1.0).unwrap();
    assert_eq!(all.items, vec![(1, 1.0), (4, 0.6), (2, 0.0), (3, -1.0)]);
    let cut = retrieve(&snap, 9, 3, 0.5).unwrap();
    assert_eq!((cut.items.len(), cut.filtered_count), (2, 1));
    assert!(retrieve(&snap, 9, 3, 1.5).unwrap().items.is_empty());
    assert!(matches!(retrieve(&snap, 8, 3, -1.0), Err(Error::ColdUser(8))));
    assert!(retrieve(&snap, 9, 0, -1.0).is_err());
}

#[test]
fn calibration_matches_a_recount() {
    let results: Vec<(f64, bool)> = (0..200).map(|i| ((i as f64 * 0.37).sin(), i % 7 == 0 || i % 5 == 1)).collect();
    for target in [0.1, 0.3, 0.5, 0.9] {
        let c = calibrate_threshold(&results, target);
        let kept: Vec<&(f64, bool)> = results.iter().filter(|r| r.0 >= c.threshold).collect();
        let rel = kept.iter().filter(|r| r.1).count();
        let total = results.iter().filter(|r| r.1).count();
        assert!((c.precision - rel as f64 / kept.len().max(1) as f64).abs() < 1e-12);
        assert!((c.recall - rel as f64 / total as f64).abs() < 1e-12);
        if c.attainable {
            assert!(c.precision >= target);
            let lower = results.iter().map(|r| r.0).filter(|&s| s < c.threshold).fold(f64::MIN, f64::max);
            if lower > f64::MIN {
                let k: Vec<_> = results.iter().filter(|r| r.0 >= lower).collect();
                assert!((k.iter().filter(|r| r.1).count() as f64 / k.len() as f64) < target);
            }
        }
    }
    assert!(!calibrate_threshold(&[(0.2, false), (0.5, false)], 0.5).attainable);
}

fn real(posts: &[u64]) -> Vec<HistoryEvent> {
    posts
        .iter()
        .enumerate()
        .map(|(i, &p)| HistoryEvent { post_id: p, action: ActionType::Like, surface: Surface::Feed, timestamp: 1_000 + i as i64 })
        .collect()
}

#[test]
fn popular_and_similar_backfill() {
    let cfg = RunConfig::from_json(SMALL).unwrap();
    let p = Prepared::generate(&cfg, 4).unwrap();
    let posts: BTreeMap<u64, _> = p.world.post_index();
    let clean: Vec<u64> = p.world.posts.iter().filter(|x| !x.integrity).map(|x| x.post_id).take(6).collect();
    let (a, b, c, d, e, f) = (clean[0], clean[1], clean[2], clean[3], clean[4], clean[5]);
    let window = vec![
        ev(1, a, 10), ev(1, b, 11), ev(1, c, 12),
        ev(2, a, 10), ev(2, b, 11), ev(2, d, 12), ev(2, e, 13),
        ev(3, c, 10), ev(3, f, 11),
        ev(4, f, 10),
    ];
    let pop = Popularity::build(&window, &posts);
    let sim = UserSimilarity::build(&window);
    let policy = BackfillPolicy { marginal_threshold: 3, fill_to: 4, neighbors: 1, ..Default::default() };
    let lang = posts[&a].lang;
    let country = posts[&a].country;

    let none = popular_backfill(lang, country, &real(&[a, b, c]), &pop, &policy, 5_000);
    assert!(none.is_empty());

    let filled = popular_backfill(99, 99, &[], &pop, &policy, 5_000);
    assert_eq!(filled.len(), 4);
    assert!(filled.iter().all(|h| h.action == ActionType::Backfill && h.timestamp < 5_000));
    assert!(filled.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    let top_count = |id: u64| window.iter().filter(|x| x.post_id == id).count();
    assert!(filled.windows(2).all(|w| top_count(w[0].post_id) <= top_count(w[1].post_id)), "most popular is most recent");

    let mine = real(&[a, d]);
    let by = by_user(&window);
    let sb = similar_user_backfill(9, lang, country, &mine, &sim, &by, &pop, &policy, 5_000);
    let ids: BTreeSet<u64> = sb.iter().map(|h| h.post_id).collect();
    assert_eq!(ids, [b, e].into_iter().collect(), "newest posts of the closest user, minus own posts");
    assert!(sb.iter().all(|h| h.timestamp < mine[0].timestamp));

    let sample = SequenceSample { user_id: 9, history: mine.clone(), long_targets: vec![], cutoff_time: 5_000 };
    let merged = with_backfill(&sample, sb.clone());
    assert_eq!(merged.history.len(), 4);
    assert_eq!(merged.history.last(), mine.last());
    assert!(merged.is_well_formed());

    let lonely = similar_user_backfill(9, lang, country, &real(&[clean[0] + 1_000_000]), &sim, &by, &pop, &policy, 5_000);
    let popular = popular_backfill(lang, country, &real(&[clean[0] + 1_000_000]), &pop, &policy, 5_000);
    assert_eq!(lonely, popular, "no neighbour falls back to popularity");
}
