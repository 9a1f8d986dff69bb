//! `GIGA-CKPT-1` files: magic line, u64 LE index length, JSON index
//! (`config` plus per-parameter name, shape, offset, len), then the
//! little-endian `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"GIGA-CKPT-1\n";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    config: serde_json::Value,
    params: Vec<Entry>,
}

pub fn save_checkpoint(path: &Path, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let mut offset = 0;
    let params = store
        .iter()
        .map(|(name, t)| {
            let e = Entry { name: name.to_string(), shape: t.shape.clone(), offset, len: t.numel() };
            offset += t.numel();
            e
        })
        .collect();
    let index = serde_json::to_vec(&Index { config: config.clone(), params })?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(index.len() as u64).to_le_bytes())?;
    f.write_all(&index)?;
    for (_, t) in store.iter() {
        for v in &t.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(bad("missing GIGA-CKPT-1 header"));
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    if rest.len() < 8 {
        return Err(bad("truncated index length"));
    }
    let n = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < n {
        return Err(bad("truncated index"));
    }
    let index: Index = serde_json::from_slice(&rest[..n])?;
    let payload = &rest[n..];
    let mut store = ParamStore::new();
    for e in index.params {
        let end = (e.offset + e.len) * 8;
        if end > payload.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(bad(&format!("parameter {} out of range", e.name)));
        }
        let data = payload[e.offset * 8..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(e.name, Tensor::new(&e.shape, data)?);
    }
    Ok((index.config, store))
}
