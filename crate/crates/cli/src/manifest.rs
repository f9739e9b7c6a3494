//! Staged artifact writing with a JSON manifest beside each output.
//!
//! Outputs are written to temporary files in their target directory and only
//! renamed into place by [`Run::commit`]. Dropping a `Run` before that deletes
//! every staged file, so a failed command leaves no partial artifacts behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::config::{invalid, RunConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    layer: Option<&'a str>,
    config: &'a RunConfig,
    inputs: &'a [FileRecord],
    output: FileRecord,
    notes: &'a Map<String, Value>,
}

struct Staged {
    role: String,
    path: PathBuf,
    sha256: String,
    file: NamedTempFile,
}

pub struct Run {
    command: &'static str,
    config: RunConfig,
    layer: Option<String>,
    inputs: Vec<FileRecord>,
    staged: Vec<Staged>,
    notes: Map<String, Value>,
}

impl Run {
    pub fn new(command: &'static str, cfg: &RunConfig) -> Self {
        Run {
            command,
            config: cfg.resolved(),
            layer: cfg.layer.clone(),
            inputs: Vec::new(),
            staged: Vec::new(),
            notes: Map::new(),
        }
    }

    /// Reads an input file and records its hash. A missing file is a validation error.
    pub fn input(&mut self, role: &str, path: &Path) -> anyhow::Result<Vec<u8>> {
        if !path.is_file() {
            return Err(invalid(format!("{role}: no such file {}", path.display())));
        }
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        if self.layer.is_none() {
            self.layer = upstream_layer(path);
        }
        self.inputs.push(FileRecord {
            role: role.into(),
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    pub fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.notes.insert(key.into(), value.into());
    }

    pub fn output(&mut self, role: &str, path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
        let file = stage(path, bytes)?;
        self.staged.push(Staged {
            role: role.into(),
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
            file,
        });
        Ok(())
    }

    /// Writes manifests, then moves every staged file into place.
    pub fn commit(self) -> anyhow::Result<()> {
        let mut ready = Vec::with_capacity(self.staged.len() * 2);
        for s in &self.staged {
            let manifest = Manifest {
                tool: "cdscope",
                version: VERSION,
                command: self.command,
                seed: self.config.seed,
                layer: self.layer.as_deref(),
                config: &self.config,
                inputs: &self.inputs,
                output: FileRecord {
                    role: s.role.clone(),
                    path: s.path.display().to_string(),
                    sha256: s.sha256.clone(),
                },
                notes: &self.notes,
            };
            let mut text = serde_json::to_string_pretty(&manifest)?;
            text.push('\n');
            let mpath = manifest_path(&s.path);
            ready.push((stage(&mpath, text.as_bytes())?, mpath));
        }
        for s in self.staged {
            ready.push((s.file, s.path));
        }
        let mut placed: Vec<PathBuf> = Vec::new();
        for (file, path) in ready {
            if let Err(e) = file.persist(&path) {
                for p in &placed {
                    let _ = fs::remove_file(p);
                }
                return Err(e.error).with_context(|| format!("moving output into {}", path.display()));
            }
            placed.push(path);
        }
        Ok(())
    }
}

fn stage(path: &Path, bytes: &[u8]) -> anyhow::Result<NamedTempFile> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut file = NamedTempFile::new_in(&dir).with_context(|| format!("staging {}", path.display()))?;
    file.write_all(bytes)?;
    file.flush()?;
    Ok(file)
}

/// Layer tag from the manifest written beside an input by an earlier step or the exporter.
fn upstream_layer(input: &Path) -> Option<String> {
    let text = fs::read_to_string(manifest_path(input)).ok()?;
    let value: Value = serde_json::from_str(&text).ok()?;
    value.get("layer")?.as_str().map(str::to_owned)
}
