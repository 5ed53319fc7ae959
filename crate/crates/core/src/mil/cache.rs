//! Bag feature cache, one file per bag.
//!
//! ```text
//! magic   8 bytes "UAPBAG01"
//! label   u8 (0 or 1)
//! flags   u8, bit 0: instance labels follow
//! id_len  u16, then id bytes (UTF-8)
//! n, d    u32 each
//! [n bytes of instance labels, 0 or 1]
//! n * d   f64 little-endian
//! ```

use std::path::Path;

use super::Bag;
use crate::error::{Error, Result};

pub const BAG_MAGIC: &[u8; 8] = b"UAPBAG01";

pub fn encode_bag(bag: &Bag) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + bag.id.len() + bag.features().len() * 8);
    out.extend_from_slice(BAG_MAGIC);
    out.push(u8::from(bag.label));
    out.push(u8::from(bag.instance_labels.is_some()));
    out.extend_from_slice(&(bag.id.len() as u16).to_le_bytes());
    out.extend_from_slice(bag.id.as_bytes());
    out.extend_from_slice(&(bag.len() as u32).to_le_bytes());
    out.extend_from_slice(&(bag.dim() as u32).to_le_bytes());
    if let Some(labels) = &bag.instance_labels {
        out.extend(labels.iter().map(|&l| u8::from(l)));
    }
    for v in bag.features() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptBag(msg.into())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(corrupt("truncated"));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn flag(b: u8, what: &str) -> Result<bool> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(corrupt(format!("{what} byte is {b}, expected 0 or 1"))),
    }
}

pub fn decode_bag(bytes: &[u8]) -> Result<Bag> {
    let mut buf = bytes;
    if take(&mut buf, 8)? != BAG_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let label = flag(take(&mut buf, 1)?[0], "label")?;
    let flags = take(&mut buf, 1)?[0];
    if flags > 1 {
        return Err(corrupt(format!("unknown flags {flags:#x}")));
    }
    let id_len = u16::from_le_bytes(take(&mut buf, 2)?.try_into().unwrap()) as usize;
    let id = std::str::from_utf8(take(&mut buf, id_len)?)
        .map_err(|_| corrupt("bag id is not UTF-8"))?
        .to_string();
    let n = u32::from_le_bytes(take(&mut buf, 4)?.try_into().unwrap()) as u64;
    let d = u32::from_le_bytes(take(&mut buf, 4)?.try_into().unwrap()) as u64;
    if n == 0 || d == 0 {
        return Err(corrupt("empty bag"));
    }
    let instance_labels = if flags & 1 == 1 {
        let raw = take(&mut buf, n as usize)?;
        Some(raw.iter().map(|&b| flag(b, "instance label")).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    if buf.len() as u64 != n * d * 8 {
        return Err(corrupt(format!("expected {} feature bytes, found {}", n * d * 8, buf.len())));
    }
    let features = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Bag::new(id, label, features, d as usize, instance_labels).map_err(|e| corrupt(e.to_string()))
}

pub fn save_bag(bag: &Bag, path: &Path) -> Result<()> {
    std::fs::write(path, encode_bag(bag)).map_err(|e| Error::io(path, e))
}

pub fn load_bag(path: &Path) -> Result<Bag> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(&bytes)
}
