//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "UAPCKPT\0"
//! version   u32
//! meta_len  u64, followed by meta_len bytes of UTF-8 JSON
//! n_tensors u32
//! per tensor:
//!   name_len u16, name bytes
//!   dtype    u8 (1 = f32)
//!   ndim     u8, then ndim x u64 dims
//!   data     prod(dims) x 4 bytes
//! sha256 of everything above, 32 bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, HeadKind, Model, ParamSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UAPCKPT\0";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Finetuned,
    Distilled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub stage: Stage,
    /// Stages this lineage went through, oldest first; strictly increasing.
    pub stage_history: Vec<Stage>,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub epoch: u32,
    #[serde(default)]
    pub labeled_ids: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Content hash of the checkpoint this one was derived from.
    #[serde(default)]
    pub parent_hash: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl ModelCheckpoint {
    /// Starts a new lineage (pretraining output).
    pub fn new(model: &Model, stage: Stage, seed: u64, dataset_fingerprint: String, epoch: u32) -> Self {
        Self {
            meta: CheckpointMeta {
                architecture: model.arch.clone(),
                stage,
                stage_history: vec![stage],
                seed,
                dataset_fingerprint,
                epoch,
                labeled_ids: Vec::new(),
                warnings: Vec::new(),
                parent_hash: None,
            },
            params: model.params.clone(),
        }
    }

    /// Checkpoint for `model` as the next stage after `parent`. Fails if the
    /// stage would not advance the lineage.
    pub fn derive(parent: &ModelCheckpoint, model: &Model, stage: Stage) -> Result<Self> {
        let last = *parent.meta.stage_history.last().unwrap_or(&parent.meta.stage);
        if stage <= last {
            return Err(Error::StageOrder(format!(
                "cannot record stage {stage:?} after {last:?}"
            )));
        }
        let mut history = parent.meta.stage_history.clone();
        history.push(stage);
        Ok(Self {
            meta: CheckpointMeta {
                architecture: model.arch.clone(),
                stage,
                stage_history: history,
                parent_hash: Some(parent.content_hash()),
                ..parent.meta.clone()
            },
            params: model.params.clone(),
        })
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.meta.architecture.clone(), self.params.clone())
    }

    pub fn head(&self) -> HeadKind {
        self.meta.architecture.head
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(encode_checkpoint(self)))
    }

    pub fn require_stage(&self, stage: Stage, what: &str) -> Result<()> {
        if self.meta.stage != stage {
            return Err(Error::StageOrder(format!(
                "{what} needs a {stage:?} checkpoint, got {:?}",
                self.meta.stage
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let meta = serde_json::to_vec(&ckpt.meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(64 + meta.len() + ckpt.params.len() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ckpt.params.entries().len() as u32).to_le_bytes());
    for e in ckpt.params.entries() {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &ckpt.params.data[e.range()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::CorruptCheckpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.at
    }
}

/// Decodes and verifies a checkpoint. Parameter names and shapes must match
/// the architecture recorded in the metadata.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
        return Err(corrupt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if &body[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, at: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u64()?;
    if meta_len > r.remaining() as u64 {
        return Err(corrupt("metadata length exceeds file"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len as usize)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        if r.u8()? != DTYPE_F32 {
            return Err(corrupt("unsupported dtype"));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let d = r.u64()?;
            numel = numel.checked_mul(d).ok_or_else(|| corrupt("tensor size overflows"))?;
            shape.push(d as usize);
        }
        let n_bytes = numel.checked_mul(4).ok_or_else(|| corrupt("tensor size overflows"))?;
        if n_bytes > r.remaining() as u64 {
            return Err(corrupt("tensor data exceeds file"));
        }
        let data = r
            .take(n_bytes as usize)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    if r.remaining() != 0 {
        return Err(corrupt("trailing bytes after tensors"));
    }
    if meta.stage_history.windows(2).any(|w| w[0] >= w[1]) || meta.stage_history.last() != Some(&meta.stage) {
        return Err(corrupt("stage history is not monotone or does not end at the stage"));
    }
    let layout = Model::build(meta.architecture.clone(), 0)
        .map_err(|e| Error::CorruptCheckpoint(format!("architecture: {e}")))?;
    let params = ParamSet::from_tensors(&layout.params, tensors)?;
    Ok(ModelCheckpoint { meta, params })
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; when `expected_head` is given, a checkpoint with a
/// different head is rejected.
pub fn load_checkpoint(path: &Path, expected_head: Option<HeadKind>) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = decode_checkpoint(&bytes)?;
    if let Some(want) = expected_head {
        if ckpt.head() != want {
            return Err(Error::CheckpointMismatch(format!(
                "{} has a {:?} head, expected {:?}",
                path.display(),
                ckpt.head(),
                want
            )));
        }
    }
    Ok(ckpt)
}

/// Warns (without failing) when a checkpoint was trained on a different
/// dataset than the one now in use. Returns the warning text.
pub fn check_fingerprint(meta: &CheckpointMeta, fingerprint: &str) -> Option<String> {
    (meta.dataset_fingerprint != fingerprint).then(|| {
        let msg = format!(
            "dataset fingerprint {} differs from checkpoint's {}",
            short(fingerprint),
            short(&meta.dataset_fingerprint)
        );
        log::warn!("{msg}");
        msg
    })
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}
