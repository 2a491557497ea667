//! Run manifests: what a CLI run read, wrote and measured.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_err, Result};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    /// Fully resolved configuration, defaults included.
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub metrics: BTreeMap<String, f64>,
    /// Wall-clock seconds per phase; not reproducible.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, config: RunConfig, seed: u64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv,
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileRecord { path: path.display().to_string(), sha256: hash_path(path)? });
        Ok(())
    }

    /// Records every file under `out` except the manifest itself.
    pub fn record_outputs(&mut self, out: &Path) -> Result<()> {
        self.outputs.clear();
        for f in files_under(out)? {
            let rel = f.strip_prefix(out).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            if rel == MANIFEST_FILE {
                continue;
            }
            self.outputs.push(FileRecord { path: rel, sha256: hash_file(&f)? });
        }
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(MANIFEST_FILE);
        crate::io::write_json(&path, self)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let p = entry.map_err(io_err(&d))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Content hash of a file, or of a directory as the hash over its sorted
/// `relative path, file hash` lines.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return hash_file(path);
    }
    let mut h = Sha256::new();
    for f in files_under(path)? {
        let rel = f.strip_prefix(path).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        h.update(format!("{rel} {}\n", hash_file(&f)?));
    }
    Ok(hex::encode(h.finalize()))
}

/// Metrics of `a` that are missing from `b` or differ by more than `tol`.
pub fn metric_mismatches(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>, tol: f64) -> Vec<String> {
    let mut out = Vec::new();
    for (k, &va) in a {
        match b.get(k) {
            Some(&vb) if (va - vb).abs() <= tol || va == vb => {}
            Some(&vb) => out.push(format!("{k}: {va} vs {vb}")),
            None => out.push(format!("{k}: missing")),
        }
    }
    for k in b.keys().filter(|k| !a.contains_key(*k)) {
        out.push(format!("{k}: unexpected"));
    }
    out
}
