//! Checkpoint files: magic line, JSON header length, JSON header, then a raw
//! little-endian f32 blob holding live weights, EMA weights and Adam moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SFMCKPT\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: serde_json::Value,
    step: u64,
    rng: serde_json::Value,
    extra: serde_json::Value,
    entries: Vec<Entry>,
    sections: Vec<String>,
}

/// One network's full training state.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub spec: serde_json::Value,
    /// Generator bookkeeping needed to resume (seed, step).
    pub rng: serde_json::Value,
    /// Scheme-specific state such as the adaptive noise scale.
    pub extra: serde_json::Value,
    pub live: ParamStore<T>,
    pub ema: ParamStore<T>,
}

fn push_f32<T: Real>(buf: &mut Vec<u8>, vals: &[T]) {
    for v in vals {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

pub fn save_checkpoint<T: Real>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    ck.live.check_compatible(&ck.ema)?;
    let entries: Vec<Entry> = ck
        .live
        .iter()
        .map(|(n, p)| Entry { name: n.to_string(), shape: p.value.shape().to_vec() })
        .collect();
    let header = Header {
        version: CHECKPOINT_VERSION,
        spec: ck.spec.clone(),
        step: ck.live.step(),
        rng: ck.rng.clone(),
        extra: ck.extra.clone(),
        entries,
        sections: ["live", "ema", "adam_m", "adam_v"].map(String::from).to_vec(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 16 * ck.live.num_values());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in ck.live.iter() {
        push_f32(&mut buf, p.value.data());
    }
    for (_, p) in ck.ema.iter() {
        push_f32(&mut buf, p.value.data());
    }
    for (_, p) in ck.live.iter() {
        push_f32(&mut buf, p.moments().0);
    }
    for (_, p) in ck.live.iter() {
        push_f32(&mut buf, p.moments().1);
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    let bad = |d: &str| Error::format(path, d);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {}", header.version)));
    }
    let total: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let blob = &bytes[16 + hlen..];
    if blob.len() != 4 * 4 * total {
        return Err(bad(&format!("blob holds {} bytes, expected {}", blob.len(), 16 * total)));
    }
    let vals: Vec<T> = blob
        .chunks_exact(4)
        .map(|c| T::from_f64(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
        .collect();
    let section = |s: usize| &vals[s * total..(s + 1) * total];
    let mut live = ParamStore::new();
    let mut ema = ParamStore::new();
    let mut off = 0;
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        live.insert(e.name.clone(), Tensor::zeros(&e.shape))?;
        live.set_state(
            &e.name,
            section(0)[off..off + n].to_vec(),
            section(2)[off..off + n].to_vec(),
            section(3)[off..off + n].to_vec(),
        )?;
        ema.insert(e.name.clone(), Tensor::new(e.shape.clone(), section(1)[off..off + n].to_vec())?)?;
        off += n;
    }
    live.set_step(header.step);
    ema.set_step(header.step);
    Ok(Checkpoint { spec: header.spec, rng: header.rng, extra: header.extra, live, ema })
}
