//! Command-line interface. Every run writes its outputs and one
//! `run_manifest.json` under `--out`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::coldstart::BackfillMode;
use crate::config::{RunConfig, Variant};
use crate::error::{config, io_err, Error, Result};
use crate::eval::{render_csv, render_table, sweep, EvalReport, SweepAxis};
use crate::experiments::{self, Prepared};
use crate::io;
use crate::manifest::{metric_mismatches, RunManifest, MANIFEST_FILE};
use crate::post_encoder::{PostEncoder, PostEmbeddings};
use crate::synth::{generate_world, measure_survival, World};

pub const EMBEDDINGS_FILE: &str = "embeddings.nxtp";
/// Tolerance of replayed metrics.
pub const REPLAY_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Parser)]
#[command(name = "nxtpost", version, about = "Sequential user-to-post recommendation on synthetic worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `train.seed` of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct WorldArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub world: PathBuf,
    /// Embedding file; defaults to the one in the world directory.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainOverrides {
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.variant {
            cfg.train.variant = v;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world and its oracle post embeddings.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the multi-channel post tower and embed every post.
    TrainPostTower {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: PathBuf,
    },
    /// Train a user tower variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        world: WorldArgs,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a user tower checkpoint on the holdout days.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an experiment on freshly generated worlds.
    Experiment {
        #[command(subcommand)]
        kind: ExperimentKind,
    },
    /// Simulate daily serving from a checkpoint.
    ServeSim {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
        #[arg(long)]
        days: Option<usize>,
    },
    /// Train `ttt` over a range of sequence lengths or layer counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Re-run the command recorded in a manifest and compare its metrics.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExperimentKind {
    /// Ablation ladder: every variant on one world.
    Ladder {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Hits@K versus days since the user history was refreshed, on a
    /// drifting and a zero-drift world.
    Staleness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_days: Option<usize>,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Hits@K over the days after training, with and without the long-term loss.
    TemporalDecay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Backfill strategies on cold and marginal users.
    ColdStart {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Post survival fractions of a generated world.
    Volatility {
        #[command(flatten)]
        common: Common,
    },
    /// How well each action predicts the next engaged post.
    ActionPredictiveness {
        #[command(flatten)]
        common: Common,
    },
}

/// Configuration and output directory fixed by a manifest being replayed.
#[derive(Debug, Clone)]
pub struct Preset {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    manifest: RunManifest,
    start: Instant,
}

impl Ctx {
    fn new(name: &str, common: &Common, argv: &[String], preset: Option<&Preset>, tweak: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let (cfg, seed, out) = match preset {
            Some(p) => (p.config.clone(), p.seed, p.out.clone()),
            None => {
                let mut cfg = match &common.config {
                    Some(path) => RunConfig::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)?,
                    None => RunConfig::default(),
                };
                tweak(&mut cfg);
                let seed = common.seed.unwrap_or(cfg.train.seed);
                cfg.train.seed = seed;
                (cfg, seed, common.out.clone())
            }
        };
        cfg.validate()?;
        std::fs::create_dir_all(&out).map_err(io_err(&out))?;
        let mut manifest = RunManifest::new(name, argv.to_vec(), cfg.clone(), seed);
        if let (None, Some(path)) = (preset, &common.config) {
            manifest.add_input(path)?;
        }
        Ok(Self { cfg, seed, out, manifest, start: Instant::now() })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.add_input(path)
    }

    fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.manifest.metrics.insert(key.into(), value);
    }

    fn reports(&mut self, prefix: &str, reports: &[EvalReport]) {
        for r in reports {
            let mut key = format!("{prefix}{}@{}", r.metric, r.k);
            for (k, v) in &r.slices {
                if k != "corpus" && k != "batch_size" {
                    key.push_str(&format!("/{k}={v}"));
                }
            }
            self.metric(key, r.value);
        }
    }

    fn timing(&mut self, phase: &str, since: Instant) {
        self.manifest.timings.insert(phase.into(), since.elapsed().as_secs_f64());
    }

    fn finish(mut self) -> Result<RunManifest> {
        self.manifest.timings.insert("total".into(), self.start.elapsed().as_secs_f64());
        self.manifest.record_outputs(&self.out)?;
        self.manifest.write(&self.out)?;
        Ok(self.manifest)
    }
}

fn load_embeddings(world: &WorldArgs) -> (PathBuf, Result<PostEmbeddings>) {
    let path = world.embeddings.clone().unwrap_or_else(|| world.world.join(EMBEDDINGS_FILE));
    let emb = io::read_embeddings(&path);
    (path, emb)
}

fn load_prepared(ctx: &mut Ctx, world: &WorldArgs) -> Result<Prepared> {
    ctx.input(&world.world)?;
    let w: World = io::load_world(&world.world)?;
    let (path, emb) = load_embeddings(world);
    let emb = emb?;
    if world.embeddings.is_some() {
        ctx.input(&path)?;
    }
    let emb = Arc::new(emb);
    Prepared::with_embeddings(&ctx.cfg, ctx.seed, w, PostEncoder::Precomputed(emb.clone()), (*emb).clone(), None)
}

fn write_reports(ctx: &Ctx, stem: &str, reports: &[EvalReport]) -> Result<()> {
    io::write_json(&ctx.out.join(format!("{stem}.json")), &reports)?;
    let csv = ctx.out.join(format!("{stem}.csv"));
    std::fs::write(&csv, render_csv(reports)).map_err(io_err(&csv))?;
    println!("{}", render_table(reports));
    Ok(())
}

/// Parses `argv` (without the program name) and runs it.
pub fn run(argv: &[String]) -> Result<RunManifest> {
    let cli = Cli::try_parse_from(std::iter::once("nxtpost".to_string()).chain(argv.iter().cloned())).map_err(|e| config(e.to_string()))?;
    execute(cli.command, argv, None)
}

pub fn execute(command: Command, argv: &[String], preset: Option<&Preset>) -> Result<RunManifest> {
    match command {
        Command::GenData { common } => gen_data(&common, argv, preset),
        Command::TrainPostTower { common, world } => train_post_tower_cmd(&common, &world, argv, preset),
        Command::Train { common, world, overrides } => train_cmd(&common, &world, &overrides, argv, preset),
        Command::Eval { common, world, checkpoint } => eval_cmd(&common, &world, &checkpoint, argv, preset),
        Command::Experiment { kind } => experiment(kind, argv, preset),
        Command::ServeSim { common, world, checkpoint, k, threshold, days } => {
            let mut ctx = Ctx::new("serve-sim", &common, argv, preset, |c| {
                if let Some(k) = k {
                    c.serving.k = k;
                }
                if let Some(t) = threshold {
                    c.serving.threshold = t;
                }
                if let Some(d) = days {
                    c.serving.days = d;
                }
            })?;
            serve_sim(&mut ctx, &world, &checkpoint)?;
            ctx.finish()
        }
        Command::Sweep { common, world, axis, values, epochs } => {
            let mut ctx = Ctx::new("sweep", &common, argv, preset, |c| {
                if let Some(e) = epochs {
                    c.train.epochs = e;
                }
            })?;
            let p = load_prepared(&mut ctx, &world)?;
            let (train_samples, eval_samples) = p.samples();
            let t = Instant::now();
            let points = sweep(axis, &values, &ctx.cfg.encoder, &ctx.cfg.loss, &ctx.cfg.train, &ctx.cfg.eval, &train_samples, &eval_samples, &p.embeddings)?;
            ctx.timing("sweep", t);
            for pt in &points {
                ctx.metric(format!("batch_hits@1/value={}", pt.value), pt.report.value);
                ctx.manifest.timings.insert(format!("secs_per_step/value={}", pt.value), pt.secs_per_step);
            }
            io::write_json(&ctx.out.join("sweep.json"), &points)?;
            let reports: Vec<EvalReport> = points.iter().map(|p| p.report.clone()).collect();
            println!("{}", render_table(&reports));
            ctx.finish()
        }
        Command::Replay { manifest, out } => replay(&manifest, &out),
    }
}

fn gen_data(common: &Common, argv: &[String], preset: Option<&Preset>) -> Result<RunManifest> {
    let mut ctx = Ctx::new("gen-data", common, argv, preset, |_| {})?;
    let t = Instant::now();
    let world = generate_world(&ctx.cfg.dataset, ctx.seed)?;
    ctx.timing("generate", t);
    io::save_world(&ctx.out, &world)?;
    let encoder = PostEncoder::Oracle { sigma: ctx.cfg.post_encoder.sigma, seed: ctx.seed };
    let emb = encoder.encode_all(&world.posts, ctx.cfg.dataset.topic_dim, 1)?;
    io::write_embeddings(&ctx.out.join(EMBEDDINGS_FILE), &emb)?;
    let (w1, w2) = measure_survival(&world.events, ctx.cfg.dataset.days);
    ctx.metric("posts", world.posts.len() as f64);
    ctx.metric("users", world.users.len() as f64);
    ctx.metric("events", world.events.len() as f64);
    ctx.metric("week1_survival", w1);
    ctx.metric("week2_survival", w2);
    println!("{} users, {} posts, {} events; survival week1 {w1:.3} week2 {w2:.3}", world.users.len(), world.posts.len(), world.events.len());
    ctx.finish()
}

fn train_post_tower_cmd(common: &Common, world: &Path, argv: &[String], preset: Option<&Preset>) -> Result<RunManifest> {
    let mut ctx = Ctx::new("train-post-tower", common, argv, preset, |c| c.post_encoder.mode = crate::config::PostEncoderMode::Trained)?;
    ctx.input(world)?;
    let w = io::load_world(world)?;
    let t = Instant::now();
    let (encoder, report) = experiments::make_post_encoder(&ctx.cfg, &w, ctx.seed)?;
    ctx.timing("train", t);
    let PostEncoder::Trained { tower, languages, countries } = &encoder else {
        return Err(config("post_encoder.mode must be trained"));
    };
    let spec = io::ModelSpec::PostTower { tower: tower.config.clone(), languages: *languages, countries: *countries };
    io::save_checkpoint(&ctx.out.join("post_tower"), spec, tower.layout(), &tower.values, None)?;
    let emb = encoder.encode_all(&w.posts, tower.config.out_dim, 2)?;
    io::write_embeddings(&ctx.out.join(EMBEDDINGS_FILE), &emb)?;
    if let Some(r) = report {
        ctx.metric("pairs", r.pairs as f64);
        ctx.metric("final_loss", r.losses.last().copied().unwrap_or(f64::NAN));
        io::write_json(&ctx.out.join("tower_report.json"), &r)?;
    }
    let posts: Vec<&crate::synth::Post> = w.posts.iter().collect();
    let (same, cross) = crate::post_encoder::topic_separation(&posts, &emb, 0.5);
    ctx.metric("same_topic_cosine", same);
    ctx.metric("cross_topic_cosine", cross);
    println!("post tower: same-topic cosine {same:.3}, cross-topic cosine {cross:.3}");
    ctx.finish()
}

fn train_cmd(common: &Common, world: &WorldArgs, overrides: &TrainOverrides, argv: &[String], preset: Option<&Preset>) -> Result<RunManifest> {
    let mut ctx = Ctx::new("train", common, argv, preset, |c| overrides.apply(c))?;
    let p = load_prepared(&mut ctx, world)?;
    let (train_samples, eval_samples) = p.samples();
    let variant = ctx.cfg.train.variant;
    let t = Instant::now();
    let (model, mut report) = p.train_variant(variant, &train_samples, &eval_samples)?;
    ctx.timing("train", t);
    let ckpt = ctx.out.join("checkpoint");
    io::save_user_model(&ckpt, &model, Some(variant.name()))?;
    report.checkpoint = Some(ckpt.display().to_string());
    let reports = p.evaluate(&model, &eval_samples)?;
    ctx.metric("final_loss", report.losses.last().copied().unwrap_or(f64::NAN));
    ctx.reports("", &reports);
    io::write_json(&ctx.out.join("train_report.json"), &report)?;
    write_reports(&ctx, "eval_report", &reports)?;
    ctx.finish()
}

fn eval_cmd(common: &Common, world: &WorldArgs, checkpoint: &Path, argv: &[String], preset: Option<&Preset>) -> Result<RunManifest> {
    let mut ctx = Ctx::new("eval", common, argv, preset, |_| {})?;
    ctx.input(checkpoint)?;
    let model = io::load_user_model(checkpoint)?;
    ctx.cfg.encoder.l_max = model.l_max();
    let p = load_prepared(&mut ctx, world)?;
    let (_, eval_samples) = p.samples();
    let reports = p.evaluate(&model, &eval_samples)?;
    ctx.reports("", &reports);
    write_reports(&ctx, "eval_report", &reports)?;
    ctx.finish()
}

fn serve_sim(ctx: &mut Ctx, world: &WorldArgs, checkpoint: &Path) -> Result<()> {
    ctx.input(checkpoint)?;
    let model = io::load_user_model(checkpoint)?;
    let p = load_prepared(ctx, world)?;
    let days = ctx.cfg.dataset.days as i64;
    let first = days - ctx.cfg.serving.days.max(1) as i64;
    let s = &ctx.cfg.serving;
    let t = Instant::now();
    let report = crate::serving::simulate(
        &p.world.posts,
        &p.events,
        &p.encoder,
        &model,
        p.d_emb(),
        first..days,
        s.k,
        s.threshold,
        s.target_precision,
        Some(&ctx.out.join("query_log.jsonl")),
    )?;
    ctx.timing("serve", t);
    ctx.manifest.timings.insert("mean_query_micros".into(), report.mean_query_micros);
    ctx.metric("queries", report.queries as f64);
    ctx.metric("hit_rate", report.hits as f64 / report.queries.max(1) as f64);
    ctx.metric("calibrated_threshold", report.calibration.threshold);
    ctx.metric("calibrated_precision", report.calibration.precision);
    let mut stored = report.clone();
    stored.mean_query_micros = 0.0;
    io::write_json(&ctx.out.join("serve_report.json"), &stored)?;
    println!(
        "{} queries, hit rate {:.4}, calibrated threshold {:.4} (precision {:.4}, recall {:.4}), {:.1} µs/query",
        report.queries,
        report.hits as f64 / report.queries.max(1) as f64,
        report.calibration.threshold,
        report.calibration.precision,
        report.calibration.recall,
        report.mean_query_micros
    );
    Ok(())
}

fn experiment(kind: ExperimentKind, argv: &[String], preset: Option<&Preset>) -> Result<RunManifest> {
    match kind {
        ExperimentKind::Ladder { common, variants, overrides } => {
            let mut ctx = Ctx::new("experiment ladder", &common, argv, preset, |c| overrides.apply(c))?;
            let p = Prepared::generate(&ctx.cfg, ctx.seed)?;
            let variants = if variants.is_empty() { Variant::LADDER.to_vec() } else { variants };
            let t = Instant::now();
            let rows = experiments::ladder(&p, &variants)?;
            ctx.timing("ladder", t);
            let reports: Vec<EvalReport> = rows.iter().flat_map(|r| r.reports.clone()).collect();
            ctx.reports("", &reports);
            io::write_json(&ctx.out.join("ladder.json"), &rows)?;
            write_reports(&ctx, "ladder_reports", &reports)?;
            ctx.finish()
        }
        ExperimentKind::Staleness { common, max_days, k } => {
            let mut ctx = Ctx::new("experiment staleness", &common, argv, preset, |c| {
                if let Some(d) = max_days {
                    c.eval.max_stale_days = d;
                }
            })?;
            let mut out: BTreeMap<&str, Vec<EvalReport>> = BTreeMap::new();
            for (name, cfg) in [("drift", ctx.cfg.clone()), ("control", experiments::control_config(&ctx.cfg))] {
                let t = Instant::now();
                let p = Prepared::generate(&cfg, ctx.seed)?;
                let series = experiments::staleness(&p, k)?;
                ctx.timing(name, t);
                ctx.reports(&format!("{name}/"), &series);
                for r in &series {
                    if let Some(d) = r.relative_drop {
                        let day = r.slices.get("staleness_days").cloned().unwrap_or_default();
                        ctx.metric(format!("{name}/relative_drop/staleness_days={day}"), d);
                    }
                }
                write_reports(&ctx, &format!("staleness_{name}"), &series)?;
                out.insert(name, series);
            }
            ctx.finish()
        }
        ExperimentKind::TemporalDecay { common, days, k } => {
            let mut ctx = Ctx::new("experiment temporal-decay", &common, argv, preset, |c| {
                if let Some(d) = days {
                    c.eval.decay_days = d;
                }
            })?;
            let p = Prepared::generate(&ctx.cfg, ctx.seed)?;
            let t = Instant::now();
            let r = experiments::temporal_decay(&p, k)?;
            ctx.timing("decay", t);
            ctx.reports("with_long/", &r.with_long);
            ctx.reports("without_long/", &r.without_long);
            let (a, b) = r.final_drops();
            ctx.metric("with_long/final_relative_drop", a);
            ctx.metric("without_long/final_relative_drop", b);
            io::write_json(&ctx.out.join("temporal_decay.json"), &r)?;
            let all: Vec<EvalReport> = r.with_long.iter().chain(&r.without_long).cloned().collect();
            write_reports(&ctx, "temporal_decay_reports", &all)?;
            ctx.finish()
        }
        ExperimentKind::ColdStart { common, k } => {
            let mut ctx = Ctx::new("experiment cold-start", &common, argv, preset, |_| {})?;
            let p = Prepared::generate(&ctx.cfg, ctx.seed)?;
            let t = Instant::now();
            let rows = experiments::cold_start(&p, &[BackfillMode::None, BackfillMode::Popular, BackfillMode::SimilarUser], k)?;
            ctx.timing("cold_start", t);
            let reports: Vec<EvalReport> = rows.iter().map(|r| r.report.clone()).collect();
            ctx.reports("", &reports);
            io::write_json(&ctx.out.join("cold_start.json"), &rows)?;
            write_reports(&ctx, "cold_start_reports", &reports)?;
            ctx.finish()
        }
        ExperimentKind::Volatility { common } => {
            let mut ctx = Ctx::new("experiment volatility", &common, argv, preset, |_| {})?;
            let world = generate_world(&ctx.cfg.dataset, ctx.seed)?;
            let v = experiments::volatility(&world, &ctx.cfg);
            ctx.metric("week1_survival", v.week1);
            ctx.metric("week2_survival", v.week2);
            io::write_json(&ctx.out.join("volatility.json"), &v)?;
            println!("week1 survival {:.4} (target {}), week2 survival {:.4} (target {})", v.week1, v.target_week1, v.week2, v.target_week2);
            ctx.finish()
        }
        ExperimentKind::ActionPredictiveness { common } => {
            let mut ctx = Ctx::new("experiment action-predictiveness", &common, argv, preset, |_| {})?;
            let p = Prepared::generate(&ctx.cfg, ctx.seed)?;
            let rows = experiments::action_rows(&p)?;
            for r in &rows {
                ctx.metric(format!("next_cosine/{}", r.action.name()), r.mean_next_cosine);
                println!("{:<14} {:>8.4} ({} events)", r.action.name(), r.mean_next_cosine, r.events);
            }
            io::write_json(&ctx.out.join("action_predictiveness.json"), &rows)?;
            ctx.finish()
        }
    }
}

/// Re-runs a manifest's command with its resolved configuration into `out`
/// and fails when any metric moved by more than [`REPLAY_TOLERANCE`].
pub fn replay(manifest_path: &Path, out: &Path) -> Result<RunManifest> {
    let original = RunManifest::read(manifest_path)?;
    let cli = Cli::try_parse_from(std::iter::once("nxtpost".to_string()).chain(original.argv.iter().cloned()))
        .map_err(|e| config(format!("manifest argv does not parse: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(config("cannot replay a replay"));
    }
    for input in &original.inputs {
        let now = crate::manifest::hash_path(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(config(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let preset = Preset { config: original.config.clone(), seed: original.seed, out: out.to_path_buf() };
    let replayed = execute(cli.command, &original.argv, Some(&preset))?;
    let diffs = metric_mismatches(&original.metrics, &replayed.metrics, REPLAY_TOLERANCE);
    if !diffs.is_empty() {
        return Err(Error::ReplayMismatch(diffs.join(", ")));
    }
    println!("replayed {} metrics within {REPLAY_TOLERANCE:e}; manifest at {}", replayed.metrics.len(), out.join(MANIFEST_FILE).display());
    Ok(replayed)
}

/// Caps the global thread pool at `NXTPOST_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NXTPOST_THREADS") {
        let n: usize = v.parse().map_err(|_| config(format!("NXTPOST_THREADS={v} is not a positive integer")))?;
        if n == 0 {
            return Err(config("NXTPOST_THREADS must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| config(e.to_string()))?;
    }
    Ok(())
}

/// Process exit code of a result: 0 success, 1 usage or configuration
/// error, 2 runtime failure.
pub fn exit_code<T>(r: &Result<T>) -> i32 {
    match r {
        Ok(_) => 0,
        Err(Error::Config(_)) | Err(Error::Core(nxtpost_core::Error::InvalidConfig(_))) => 1,
        Err(_) => 2,
    }
}
