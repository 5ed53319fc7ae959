//! Stage output directories and their manifests.
//!
//! A stage writes into `<out>/.<name>.partial` and renames it to
//! `<out>/<name>` once every file is in place, so a finished stage
//! directory is never modified afterwards.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    /// Hash of the whole configuration, seed and output directory excluded.
    pub config_hash: String,
    /// Hash of only the sections this stage and its inputs depend on.
    pub stage_config_hash: String,
    pub seed: u64,
    pub dataset_fingerprint: Option<String>,
    pub wall_time_secs: f64,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// File name inside the stage directory to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub config: RunConfig,
    pub version: String,
}

impl StageManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::new("E_JSON", format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Config sections each stage depends on, upstream stages included.
fn stage_sections(stage: &str) -> &'static [&'static str] {
    match stage {
        "pretrain" => &["dataset", "model.encoder", "model.projection", "pretrain"],
        "finetune" => &["dataset", "model", "pretrain", "finetune"],
        "distill" => &["dataset", "model", "pretrain", "finetune", "distill"],
        "ualoop" | "ualoop-random" => &["dataset", "model", "pretrain", "finetune", "ualoop"],
        "mil" => &["dataset", "model", "pretrain", "finetune", "distill", "mil"],
        _ => &["dataset", "model", "pretrain", "finetune", "distill", "ualoop", "mil"],
    }
}

pub fn stage_config_hash(cfg: &RunConfig, stage: &str) -> String {
    let full = serde_json::to_value(cfg).expect("config serializes");
    let mut picked = BTreeMap::new();
    for path in stage_sections(stage) {
        let mut v = &full;
        for p in path.split('.') {
            v = &v[p];
        }
        picked.insert(*path, v.clone());
    }
    hex::encode(Sha256::digest(serde_json::to_vec(&picked).expect("json")))
}

/// A stage directory being filled.
pub struct StageDir {
    pub name: String,
    final_dir: PathBuf,
    tmp: PathBuf,
    inputs: BTreeMap<String, String>,
    started: std::time::Instant,
}

impl StageDir {
    /// Refuses to start if `<out>/<name>` already exists.
    pub fn create(out: &Path, name: &str) -> CliResult<Self> {
        let final_dir = out.join(name);
        if final_dir.exists() {
            return Err(CliError::new(
                "E_EXISTS",
                format!("{} already exists; run directories are append-only", final_dir.display()),
            ));
        }
        let tmp = out.join(format!(".{name}.partial"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        Ok(Self {
            name: name.to_string(),
            final_dir,
            tmp,
            inputs: BTreeMap::new(),
            started: std::time::Instant::now(),
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.tmp.join(file)
    }

    pub fn final_path(&self) -> &Path {
        &self.final_dir
    }

    pub fn record_input(&mut self, path: &Path, sha: String) {
        self.inputs.insert(path.display().to_string(), sha);
    }

    pub fn write(&self, file: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.path(file);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(file, text)
    }

    /// Hashes every file, writes the manifest and moves the directory into
    /// place.
    pub fn finish(self, cfg: &RunConfig, dataset_fingerprint: Option<String>) -> CliResult<PathBuf> {
        let mut outputs = BTreeMap::new();
        let mut stack = vec![self.tmp.clone()];
        while let Some(dir) = stack.pop() {
            let entries = std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
            for entry in entries {
                let p = entry.map_err(|e| CliError::io(&dir, e))?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(&self.tmp).expect("inside stage dir");
                    let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                    outputs.insert(rel, sha256_file(&p)?);
                }
            }
        }
        let manifest = StageManifest {
            stage: self.name.clone(),
            config_hash: cfg.hash(),
            stage_config_hash: stage_config_hash(cfg, &self.name),
            seed: cfg.seed,
            dataset_fingerprint,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            inputs: self.inputs.clone(),
            outputs,
            config: cfg.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        self.write_json(MANIFEST, &manifest)?;
        std::fs::rename(&self.tmp, &self.final_dir).map_err(|e| CliError::io(&self.final_dir, e))?;
        Ok(self.final_dir)
    }
}

/// Locates `file` from a finished upstream stage, checking that it still
/// matches its manifest and that the upstream run used the same relevant
/// configuration and seed. Returns the path and content hash.
pub fn upstream_file(cfg: &RunConfig, stage: &str, file: &str) -> CliResult<(PathBuf, String)> {
    let dir = cfg.out.join(stage);
    if !dir.join(MANIFEST).exists() {
        return Err(CliError::new(
            "E_MISSING_INPUT",
            format!("no finished `{stage}` stage in {}", cfg.out.display()),
        ));
    }
    let manifest = StageManifest::load(&dir)?;
    let path = dir.join(file);
    let recorded = manifest
        .outputs
        .get(file)
        .ok_or_else(|| CliError::new("E_MISSING_INPUT", format!("`{stage}` did not produce {file}")))?;
    let actual = sha256_file(&path)?;
    if &actual != recorded {
        return Err(CliError::new(
            "E_STALE_INPUT",
            format!("{} changed after its stage finished", path.display()),
        ));
    }
    if manifest.seed != cfg.seed || manifest.stage_config_hash != stage_config_hash(cfg, stage) {
        return Err(CliError::new(
            "E_STALE_INPUT",
            format!("`{stage}` outputs were produced with a different configuration or seed"),
        ));
    }
    Ok((path, actual))
}
