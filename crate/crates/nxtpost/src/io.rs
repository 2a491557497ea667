//! File formats: JSON Lines for worlds, the binary `NXTP` embedding file and
//! f32 checkpoints with a JSON manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nxtpost_core::baseline::AvgBaseline;
use nxtpost_core::encoder::{EncoderConfig, ModelParams};
use nxtpost_core::fusion::{PostTower, PostTowerConfig};
use nxtpost_core::model::UserModel;
use nxtpost_core::params::Layout;

use crate::error::{io_err, Error, Result};
use crate::post_encoder::PostEmbeddings;
use crate::synth::{InteractionEvent, Post, UserProfile, World};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"NXTP";
pub const EMBEDDING_VERSION: u32 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), reason: reason.into() }
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub const POSTS_FILE: &str = "posts.jsonl";
pub const USERS_FILE: &str = "users.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";

pub fn save_world(dir: &Path, world: &World) -> Result<()> {
    write_jsonl(&dir.join(POSTS_FILE), &world.posts)?;
    write_jsonl(&dir.join(USERS_FILE), &world.users)?;
    write_jsonl(&dir.join(EVENTS_FILE), &world.events)
}

pub fn load_world(dir: &Path) -> Result<World> {
    let posts: Vec<Post> = read_jsonl(&dir.join(POSTS_FILE))?;
    let users: Vec<UserProfile> = read_jsonl(&dir.join(USERS_FILE))?;
    let mut events: Vec<InteractionEvent> = read_jsonl(&dir.join(EVENTS_FILE))?;
    events.sort_by_key(|e| (e.user_id, e.timestamp, e.post_id));
    Ok(World { posts, users, events })
}

/// Serializes embeddings: magic, version, count, dim, then `(u64 id, dim × f32)`
/// records in ascending id order, all little-endian.
pub fn encode_embeddings(emb: &PostEmbeddings) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + emb.len() * (8 + 4 * emb.dim));
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&emb.version.to_le_bytes());
    buf.extend_from_slice(&(emb.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(emb.dim as u32).to_le_bytes());
    for (id, v) in &emb.vectors {
        buf.extend_from_slice(&id.to_le_bytes());
        for &x in v {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<PostEmbeddings> {
    if bytes.len() < 16 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(format_err(path, "missing NXTP header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    let count = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    let rec = 8 + 4 * dim;
    if bytes.len() != 16 + count * rec {
        return Err(format_err(path, format!("expected {} bytes for {count} records of dim {dim}, found {}", 16 + count * rec, bytes.len())));
    }
    let mut emb = PostEmbeddings::new(dim, version);
    for r in bytes[16..].chunks_exact(rec) {
        let id = u64::from_le_bytes(r[..8].try_into().expect("8 bytes"));
        let v: Vec<f64> = r[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        if emb.vectors.insert(id, v).is_some() {
            return Err(format_err(path, format!("duplicate id {id}")));
        }
    }
    Ok(emb)
}

pub fn write_embeddings(path: &Path, emb: &PostEmbeddings) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&encode_embeddings(emb)).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_embeddings(path: &Path) -> Result<PostEmbeddings> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    decode_embeddings(&bytes, path)
}

/// Which model a checkpoint holds, with everything needed to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Transformer { encoder: EncoderConfig },
    Average { d_emb: usize, hidden: usize, l_max: usize },
    PostTower { tower: PostTowerConfig, languages: usize, countries: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelSpec,
    /// Offsets count f32 elements into the payload.
    pub tensors: BTreeMap<String, TensorEntry>,
    pub total: usize,
    #[serde(default)]
    pub variant: Option<String>,
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_PAYLOAD: &str = "tensors.bin";

pub enum Loaded {
    User(UserModel),
    Post(PostTower, usize, usize),
}

pub fn spec_of(model: &UserModel) -> ModelSpec {
    match model {
        UserModel::Transformer(p) => ModelSpec::Transformer { encoder: p.config.clone() },
        UserModel::Average(a) => ModelSpec::Average { d_emb: a.d_emb, hidden: a.hidden, l_max: a.l_max },
    }
}

/// Writes `dir/manifest.json` and `dir/tensors.bin`.
pub fn save_checkpoint(dir: &Path, model: ModelSpec, layout: &Layout, values: &[f64], variant: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tensors = layout
        .specs()
        .iter()
        .map(|s| (s.name.clone(), TensorEntry { shape: [s.id.rows, s.id.cols], offset: s.id.offset }))
        .collect();
    let manifest = CheckpointManifest {
        format: "nxtpost-checkpoint-v1".into(),
        model,
        tensors,
        total: layout.total(),
        variant: variant.map(str::to_owned),
    };
    write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)?;
    let path = dir.join(CHECKPOINT_PAYLOAD);
    let mut w = create(&path)?;
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    w.write_all(&bytes).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))
}

pub fn save_user_model(dir: &Path, model: &UserModel, variant: Option<&str>) -> Result<()> {
    save_checkpoint(dir, spec_of(model), model.layout(), model.values(), variant)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Loaded)> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let manifest: CheckpointManifest = read_json(&mpath)?;
    let ppath = dir.join(CHECKPOINT_PAYLOAD);
    let bytes = fs::read(&ppath).map_err(io_err(&ppath))?;
    if bytes.len() != 4 * manifest.total {
        return Err(format_err(&ppath, format!("expected {} f32 values, found {} bytes", manifest.total, bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    let loaded = match &manifest.model {
        ModelSpec::Transformer { encoder } => Loaded::User(UserModel::Transformer(ModelParams::from_values(encoder.clone(), values)?)),
        ModelSpec::Average { d_emb, hidden, l_max } => Loaded::User(UserModel::Average(AvgBaseline::from_values(*d_emb, *hidden, *l_max, values)?)),
        ModelSpec::PostTower { tower, languages, countries } => Loaded::Post(PostTower::from_values(tower.clone(), values)?, *languages, *countries),
    };
    let layout = match &loaded {
        Loaded::User(m) => m.layout(),
        Loaded::Post(t, ..) => t.layout(),
    };
    for s in layout.specs() {
        match manifest.tensors.get(&s.name) {
            Some(e) if e.shape == [s.id.rows, s.id.cols] && e.offset == s.id.offset => {}
            _ => return Err(format_err(&mpath, format!("tensor {} missing or mis-shaped", s.name))),
        }
    }
    if manifest.tensors.len() != layout.specs().len() {
        return Err(format_err(&mpath, "unexpected extra tensors"));
    }
    Ok((manifest, loaded))
}

pub fn load_user_model(dir: &Path) -> Result<UserModel> {
    match load_checkpoint(dir)?.1 {
        Loaded::User(m) => Ok(m),
        Loaded::Post(..) => Err(format_err(dir, "checkpoint holds a post tower, not a user model")),
    }
}
