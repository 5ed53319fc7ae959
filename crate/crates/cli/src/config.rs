//! Run configuration: a TOML file with nested sections, plus dotted
//! `key=value` overrides that win over the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};
use uapath::data::{BagSpec, SyntheticSpec};
use uapath::mil::MilConfig;
use uapath::model::{EncoderConfig, HeadKind, ProjectionHeadConfig};
use uapath::sslpipe::StageConfig;
use uapath::ualoop::Selection;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seed for every stage; each stage section's own `seed` is replaced by it.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub distill: StageConfig,
    pub ualoop: UaLoopSection,
    pub mil: MilSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            pretrain: StageConfig::pretrain_default(),
            finetune: StageConfig::finetune_default(),
            distill: StageConfig::distill_default(),
            ualoop: UaLoopSection::default(),
            mil: MilSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    /// Manifest CSV or class-folder directory. When absent the synthetic
    /// generator is used.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Defaults to the run seed.
    pub split_seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: SyntheticSpec::default(),
            split: [0.8, 0.1, 0.1],
            split_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub projection: ProjectionHeadConfig,
    /// Classifier head used by fine-tuning.
    pub head: HeadKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            projection: ProjectionHeadConfig::default(),
            head: HeadKind::Evidential,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UaLoopSection {
    pub rounds: usize,
    pub per_round_fraction: f64,
    pub selection: Selection,
    pub warm_start: bool,
}

impl Default for UaLoopSection {
    fn default() -> Self {
        Self {
            rounds: 10,
            per_round_fraction: 0.01,
            selection: Selection::Uncertainty,
            warm_start: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BagSource {
    /// Feature vectors straight from the bag generator.
    Synthetic,
    /// Synthetic patch images featurized by a trained encoder.
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MilSection {
    pub train: MilConfig,
    pub bags: BagSpec,
    pub source: BagSource,
    /// Previously cached bags with `train/` and `test/` subdirectories;
    /// overrides `source`.
    pub bags_dir: Option<PathBuf>,
}

impl Default for MilSection {
    fn default() -> Self {
        Self {
            train: MilConfig::default(),
            bags: BagSpec::default(),
            source: BagSource::Synthetic,
            bags_dir: None,
        }
    }
}

impl RunConfig {
    /// Loads `path` (or the defaults when `None`), applies `overrides` in
    /// order and resolves relative paths against the config file.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<Self> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::new("E_CONFIG", format!("cannot read {}: {e}", p.display())))?;
                let table: Table = text
                    .parse()
                    .map_err(|e: toml::de::Error| CliError::new("E_CONFIG", format!("{}: {}", p.display(), e.message())))?;
                (table, p.parent().map(Path::to_path_buf))
            }
            None => (Table::new(), None),
        };
        for (key, value) in overrides {
            set_path(&mut table, key, parse_value(value))?;
        }
        let mut cfg = Self::from_table(table)?;
        if let Some(base) = base {
            let resolve = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            if let Some(m) = cfg.dataset.manifest.as_mut() {
                resolve(m);
            }
            if let Some(d) = cfg.mil.bags_dir.as_mut() {
                resolve(d);
            }
        }
        Ok(cfg)
    }

    /// Parses an already assembled table, rejecting keys the schema does
    /// not know.
    pub fn from_table(table: Table) -> CliResult<Self> {
        let cfg: RunConfig = Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| CliError::new("E_CONFIG", e.message().to_string()))?;
        let known = Value::try_from(&cfg).map_err(|e| CliError::new("E_CONFIG", e.to_string()))?;
        if let Value::Table(known) = known {
            if let Some(k) = unknown_key(&table, &known, "") {
                return Err(CliError::new("E_CONFIG", format!("unknown config key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_str(text: &str) -> CliResult<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::new("E_CONFIG", e.message().to_string()))?;
        Self::from_table(table)
    }

    fn validate(&self) -> CliResult<()> {
        let [a, b, c] = self.dataset.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(CliError::new("E_CONFIG", format!("dataset.split {:?} must sum to 1", self.dataset.split)));
        }
        if self.model.head == HeadKind::Projection {
            return Err(CliError::new("E_CONFIG", "model.head must be softmax or evidential"));
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the seed and output directory
    /// blanked, so that seeds of one experiment share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.out = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn split_seed(&self) -> u64 {
        self.dataset.split_seed.unwrap_or(self.seed)
    }

    pub fn stage(&self, base: &StageConfig) -> StageConfig {
        StageConfig {
            seed: self.seed,
            ..base.clone()
        }
    }
}

/// Interprets an override value as a TOML literal, falling back to a bare
/// string (`head=softmax`).
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn set_path(table: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::new("E_CONFIG", format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::new("E_CONFIG", format!("override `{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn unknown_key(given: &Table, known: &Table, prefix: &str) -> Option<String> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => return Some(path),
            (Value::Table(g), Some(Value::Table(kn))) => {
                if let Some(bad) = unknown_key(g, kn, &path) {
                    return Some(bad);
                }
            }
            _ => {}
        }
    }
    None
}

/// Splits `key=value`.
pub fn split_override(s: &str) -> CliResult<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::new("E_ARG", format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
